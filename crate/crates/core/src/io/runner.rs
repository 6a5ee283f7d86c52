//! Run orchestration: deterministic simulate / resume / diagnose drivers
//! and the background NDJSON diagnostics writer.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use serde::Serialize;

use crate::algebra::{check_algebra, AlgebraReport};
use crate::diagnostics::decay_fit;
use crate::dynamics::{
    make_initial_data, simulate, DiagRow, PlasmaState, RunRecord, RunSink, SimConfig,
};
use crate::equilibrium::{solve_equilibrium, Equilibrium};
use crate::error::{EmxError, Result};

use super::checkpoint::{
    load_equilibrium_checkpoint, load_state_checkpoint, save_equilibrium_checkpoint,
    save_state_checkpoint,
};
use super::config::RunConfig;
use super::{sha256_hex, sub_seed};

/// Well-known file names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> RunPaths {
        RunPaths { dir: dir.into() }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.dir.join("resolved-config.toml")
    }

    pub fn equilibrium(&self) -> PathBuf {
        self.dir.join("equilibrium.emx")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.dir.join("diagnostics.ndjson")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:08}.emx"))
    }

    pub fn final_state(&self) -> PathBuf {
        self.dir.join("final.emx")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn fits(&self) -> PathBuf {
        self.dir.join("fits.ndjson")
    }

    pub fn csv(&self) -> PathBuf {
        self.dir.join("diagnostics.csv")
    }

    /// All state checkpoints in the directory with their step index,
    /// including the final state (labeled with its own step count).
    pub fn state_checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(rest) = name
                .strip_prefix("checkpoint-")
                .and_then(|r| r.strip_suffix(".emx"))
            {
                if let Ok(step) = rest.parse::<usize>() {
                    out.push((step, path));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Serialize rows as NDJSON on a background thread behind a bounded
/// queue, so stepping never blocks on disk unless the writer falls far
/// behind. `finish` drains the queue and surfaces any write error.
pub struct NdjsonWriter {
    tx: Option<SyncSender<String>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl NdjsonWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<NdjsonWriter> {
        Ok(NdjsonWriter::spawn(std::fs::File::create(path.as_ref())?))
    }

    pub fn append(path: impl AsRef<Path>) -> Result<NdjsonWriter> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path.as_ref())?;
        Ok(NdjsonWriter::spawn(file))
    }

    fn spawn(file: std::fs::File) -> NdjsonWriter {
        let (tx, rx) = sync_channel::<String>(256);
        let handle = std::thread::spawn(move || -> std::io::Result<()> {
            let mut w = std::io::BufWriter::new(file);
            for line in rx {
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")?;
            }
            w.flush()
        });
        NdjsonWriter {
            tx: Some(tx),
            handle: Some(handle),
        }
    }

    pub fn write<T: Serialize>(&self, row: &T) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| EmxError::Format(e.to_string()))?;
        self.tx
            .as_ref()
            .expect("writer not finished")
            .send(line)
            .map_err(|_| EmxError::Other("diagnostics writer thread died".into()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.finish_inner()
    }

    fn finish_inner(&mut self) -> Result<()> {
        drop(self.tx.take());
        if let Some(handle) = self.handle.take() {
            handle
                .join()
                .map_err(|_| EmxError::Other("diagnostics writer thread panicked".into()))?
                .map_err(EmxError::Io)?;
        }
        Ok(())
    }
}

impl Drop for NdjsonWriter {
    fn drop(&mut self) {
        let _ = self.finish_inner();
    }
}

/// Sink that streams rows to the run's NDJSON file and writes periodic
/// (and post-mortem) state checkpoints.
struct DirSink {
    writer: NdjsonWriter,
    paths: RunPaths,
    seed: u64,
    config_hash: String,
    /// Added to the local step index on resume so the stream continues
    /// the original numbering.
    step_offset: usize,
    /// Skip the first emitted row (a resumed run would otherwise repeat
    /// the row of the checkpointed step).
    skip_first: bool,
    skipped: bool,
}

impl RunSink for DirSink {
    fn emit(&mut self, row: &DiagRow) -> Result<()> {
        if self.skip_first && !self.skipped {
            self.skipped = true;
            return Ok(());
        }
        let mut row = row.clone();
        row.step += self.step_offset;
        self.writer.write(&row)
    }

    fn checkpoint(&mut self, step: usize, state: &PlasmaState) -> Result<()> {
        save_state_checkpoint(
            self.paths.checkpoint(step + self.step_offset),
            state,
            self.seed,
            &self.config_hash,
        )
    }
}

fn sim_config(cfg: &RunConfig, t_end: f64) -> SimConfig {
    SimConfig {
        dt: cfg.time.dt,
        t_end,
        scheme: cfg.time.scheme,
        dealias: cfg.time.dealias,
        gauss_clean_every: cfg.time.gauss_clean_every,
        cadence: cfg.output.cadence,
        checkpoint_every: cfg.output.checkpoint_every,
        positivity_floor: cfg.output.positivity_floor,
    }
}

/// Solve the steady state described by the configuration.
pub fn build_equilibrium(cfg: &RunConfig) -> Result<Equilibrium> {
    let doping = cfg.doping_profile()?;
    solve_equilibrium(
        &doping,
        cfg.equilibrium.m_i,
        cfg.equilibrium.bbar,
        cfg.equilibrium.tol,
    )
}

/// Run a simulation into a fresh run directory: resolved config echo,
/// equilibrium checkpoint, NDJSON diagnostics, periodic checkpoints, and
/// a final state checkpoint. On a numerical failure the post-mortem
/// checkpoint is written before the error propagates.
pub fn run_simulation(
    cfg: &RunConfig,
    out_dir: impl AsRef<Path>,
    equilibrium_from: Option<&Path>,
) -> Result<RunRecord> {
    let paths = RunPaths::new(out_dir.as_ref());
    std::fs::create_dir_all(&paths.dir)?;
    let resolved = cfg.to_toml()?;
    std::fs::write(paths.resolved_config(), &resolved)?;
    let config_hash = sha256_hex(resolved.as_bytes());

    let eq = match equilibrium_from {
        Some(path) => {
            let (eq, _) = load_equilibrium_checkpoint(path)?;
            if eq.grid().dims() != cfg.grid.d || eq.grid().n_per_axis() != cfg.grid.n_per_axis {
                return Err(EmxError::Validation {
                    key: "equilibrium".into(),
                    constraint: "checkpoint grid does not match the configuration".into(),
                });
            }
            eq
        }
        None => build_equilibrium(cfg)?,
    };
    save_equilibrium_checkpoint(paths.equilibrium(), &eq, cfg.seed, &config_hash)?;

    let init = make_initial_data(
        &eq,
        &cfg.perturbation_spec(),
        sub_seed(cfg.seed, "perturbation"),
        cfg.output.positivity_floor,
    )?;

    let mut sink = DirSink {
        writer: NdjsonWriter::create(paths.diagnostics())?,
        paths: paths.clone(),
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        step_offset: 0,
        skip_first: false,
        skipped: false,
    };
    let sim = sim_config(cfg, cfg.time.t_end);
    let outcome = simulate(&sim, &eq, init, &mut sink);
    let flush = sink.writer.finish();
    let (record, state) = outcome?;
    flush?;
    save_state_checkpoint(paths.final_state(), &state, cfg.seed, &config_hash)?;
    std::fs::write(
        paths.summary(),
        serde_json::to_vec_pretty(&record).map_err(|e| EmxError::Format(e.to_string()))?,
    )?;
    Ok(record)
}

/// Continue an interrupted or shortened run from its latest checkpoint to
/// the configured end time, appending to the diagnostics stream.
pub fn resume_run(run_dir: impl AsRef<Path>) -> Result<RunRecord> {
    let paths = RunPaths::new(run_dir.as_ref());
    let resolved = std::fs::read_to_string(paths.resolved_config())?;
    let cfg = super::config::parse_config(&resolved)?;
    let config_hash = sha256_hex(resolved.as_bytes());
    let (eq, _) = load_equilibrium_checkpoint(paths.equilibrium())?;

    // latest state: the highest-step periodic checkpoint, or the final
    // state if that is further along
    let mut candidates = paths.state_checkpoints()?;
    if paths.final_state().exists() {
        let (s, _) = load_state_checkpoint(paths.final_state())?;
        let step = (s.t / cfg.time.dt).round() as usize;
        candidates.push((step, paths.final_state()));
        candidates.sort();
    }
    let Some((step_done, latest)) = candidates.pop() else {
        return Err(EmxError::Validation {
            key: "run".into(),
            constraint: "no checkpoint found to resume from".into(),
        });
    };
    let (state, _) = load_state_checkpoint(&latest)?;

    let steps_total = (cfg.time.t_end / cfg.time.dt).round() as usize;
    if step_done >= steps_total {
        // already complete; report the existing summary if present
        if let Ok(bytes) = std::fs::read(paths.summary()) {
            if let Ok(record) = serde_json::from_slice::<RunRecord>(&bytes) {
                return Ok(record);
            }
        }
        return Err(EmxError::Validation {
            key: "run".into(),
            constraint: "run is already complete and has no summary".into(),
        });
    }

    let mut sink = DirSink {
        writer: NdjsonWriter::append(paths.diagnostics())?,
        paths: paths.clone(),
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        step_offset: step_done,
        skip_first: true,
        skipped: false,
    };
    let remaining = (steps_total - step_done) as f64 * cfg.time.dt;
    let sim = sim_config(&cfg, remaining);
    let outcome = simulate(&sim, &eq, state, &mut sink);
    let flush = sink.writer.finish();
    let (mut record, state) = outcome?;
    flush?;
    record.steps += step_done;
    save_state_checkpoint(paths.final_state(), &state, cfg.seed, &config_hash)?;
    std::fs::write(
        paths.summary(),
        serde_json::to_vec_pretty(&record).map_err(|e| EmxError::Format(e.to_string()))?,
    )?;
    Ok(record)
}

/// One decay fit over a diagnostics quantity.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct DecayFitRow {
    pub quantity: String,
    pub t0: f64,
    pub t1: f64,
    pub rate: f64,
    pub r2: f64,
    pub samples: usize,
}

/// Read a run's diagnostics stream, fit exponential decay rates over the
/// window (default: second half of the run), and export both an NDJSON
/// fit report and a CSV table of the raw rows for plotting.
pub fn diagnose_run(
    run_dir: impl AsRef<Path>,
    window: Option<(f64, f64)>,
) -> Result<Vec<DecayFitRow>> {
    let paths = RunPaths::new(run_dir.as_ref());
    let text = std::fs::read_to_string(paths.diagnostics())?;
    let mut rows: Vec<DiagRow> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| EmxError::Format(e.to_string()))?);
    }
    if rows.is_empty() {
        return Err(EmxError::InsufficientData(
            "diagnostics stream is empty".into(),
        ));
    }
    let t_final = rows.last().unwrap().t;
    let window = window.unwrap_or((t_final / 2.0, t_final));

    let quantities: [(&str, fn(&DiagRow) -> f64); 5] = [
        ("norm_nut_s3", |r| r.norm_nut_s3),
        ("norm_f_s2", |r| r.norm_f_s2),
        ("norm_dtb_s1", |r| r.norm_dtb_s1),
        ("norm_gradb_s1", |r| r.norm_gradb_s1),
        ("e_quad", |r| r.e_quad),
    ];
    let writer = NdjsonWriter::create(paths.fits())?;
    let mut fits = Vec::new();
    for (name, get) in quantities {
        // zero samples (for instance magnetic norms of an electrostatic
        // run, or curl-free fields at t = 0) carry no decay information
        let series: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.t, get(r)))
            .filter(|(_, v)| *v > 0.0)
            .collect();
        let in_window = series
            .iter()
            .filter(|(t, _)| *t >= window.0 && *t <= window.1)
            .count();
        let fit = decay_fit(&series, window);
        let (rate, r2) = match fit {
            Ok(pair) => pair,
            // a quantity without enough positive samples is simply absent
            // from the report
            Err(EmxError::InsufficientData(_)) => continue,
            Err(other) => return Err(other),
        };
        let fit = DecayFitRow {
            quantity: name.to_string(),
            t0: window.0,
            t1: window.1,
            rate,
            r2,
            samples: in_window,
        };
        writer.write(&fit)?;
        fits.push(fit);
    }
    writer.finish()?;

    let mut csv = String::new();
    csv.push_str(
        "step,t,norm_nut_s3,norm_f_s2,norm_g_s2,norm_dtb_s1,norm_gradb_s1,norm_z_s0,e_quad,gauss_residual,div_b_residual,min_n,min_theta\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.t,
            r.norm_nut_s3,
            r.norm_f_s2,
            r.norm_g_s2,
            r.norm_dtb_s1,
            r.norm_gradb_s1,
            r.norm_z_s0,
            r.e_quad,
            r.gauss_residual,
            r.div_b_residual,
            r.min_n,
            r.min_theta
        ));
    }
    std::fs::write(paths.csv(), csv)?;
    Ok(fits)
}

/// Run the randomized structural checks of the symmetrizer algebra; the
/// sample stream is drawn from the "algebra"-labeled sub-seed.
pub fn verify_algebra(samples: usize, seed: u64) -> Result<AlgebraReport> {
    check_algebra(samples, sub_seed(seed, "algebra"))
}
