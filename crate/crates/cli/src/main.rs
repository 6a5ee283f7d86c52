//! `emx` — command-line driver for the two-fluid plasma laboratory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure
//! (positivity loss or blowup; a post-mortem checkpoint is written),
//! 4 solver non-convergence. Every command prints one machine-readable
//! NDJSON row on standard output; human-readable errors go to standard
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use emx_core::io::{
    build_equilibrium, diagnose_run, load_config, resume_run, run_simulation,
    save_equilibrium_checkpoint, sha256_hex, thread_cap, verify_algebra,
};
use emx_core::{exit_code_for, EmxError};

#[derive(Parser)]
#[command(name = "emx", about = "Two-fluid plasma laboratory on the periodic box", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the steady state for a configuration and save it.
    Equilibrium {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation into a run directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Reuse a previously saved equilibrium checkpoint.
        #[arg(long)]
        equilibrium: Option<PathBuf>,
        /// Run directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Randomized structural checks of the symmetrizer algebra.
    VerifyAlgebra {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit decay rates over a run's diagnostics stream.
    Diagnose {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// Fit window as "t0,t1" (default: second half of the run).
        #[arg(long, value_parser = parse_window)]
        window: Option<(f64, f64)>,
    },
    /// Continue a run from its latest checkpoint.
    Resume {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected two comma-separated times, e.g. 2,10".into());
    }
    let t0: f64 = parts[0].trim().parse().map_err(|_| "invalid start time")?;
    let t1: f64 = parts[1].trim().parse().map_err(|_| "invalid end time")?;
    if !(t0 < t1) {
        return Err("window start must precede its end".into());
    }
    Ok((t0, t1))
}

/// The one machine row every command writes to standard output.
#[derive(Serialize)]
struct OutcomeRow<'a, T: Serialize> {
    command: &'a str,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<T>,
}

fn emit<T: Serialize>(command: &str, result: Result<T, &EmxError>) -> bool {
    let row = match result {
        Ok(detail) => OutcomeRow {
            command,
            ok: true,
            error: None,
            detail: Some(detail),
        },
        Err(err) => OutcomeRow {
            command,
            ok: false,
            error: Some(err.to_string()),
            detail: None,
        },
    };
    match serde_json::to_string(&row) {
        Ok(line) => {
            println!("{line}");
            true
        }
        Err(e) => {
            eprintln!("emx: failed to serialize outcome: {e}");
            false
        }
    }
}

fn run(cli: Cli) -> Result<(), (String, EmxError)> {
    match cli.command {
        Command::Equilibrium { config, out } => {
            let wrap = |e: EmxError| ("equilibrium".to_string(), e);
            let cfg = load_config(&config).map_err(wrap)?;
            let eq = build_equilibrium(&cfg).map_err(wrap)?;
            let hash = cfg
                .to_toml()
                .map(|t| sha256_hex(t.as_bytes()))
                .map_err(wrap)?;
            save_equilibrium_checkpoint(&out, &eq, cfg.seed, &hash).map_err(wrap)?;
            emit(
                "equilibrium",
                Ok(serde_json::json!({
                    "out": out,
                    "residual": eq.residual,
                })),
            );
            Ok(())
        }
        Command::Simulate {
            config,
            equilibrium,
            out,
        } => {
            let wrap = |e: EmxError| ("simulate".to_string(), e);
            let cfg = load_config(&config).map_err(wrap)?;
            let record = run_simulation(&cfg, &out, equilibrium.as_deref()).map_err(wrap)?;
            emit("simulate", Ok(record));
            Ok(())
        }
        Command::VerifyAlgebra { samples, seed } => {
            let report =
                verify_algebra(samples, seed).map_err(|e| ("verify-algebra".to_string(), e))?;
            let pass = report.pass;
            emit("verify-algebra", Ok(report));
            if pass {
                Ok(())
            } else {
                Err((
                    "verify-algebra".to_string(),
                    EmxError::Other("algebra checks failed".into()),
                ))
            }
        }
        Command::Diagnose { run, window } => {
            let fits = diagnose_run(&run, window).map_err(|e| ("diagnose".to_string(), e))?;
            emit("diagnose", Ok(fits));
            Ok(())
        }
        Command::Resume { run } => {
            let record = resume_run(&run).map_err(|e| ("resume".to_string(), e))?;
            emit("resume", Ok(record));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // honor the worker cap even though desk-scale kernels are serial
    let _threads = thread_cap();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((command, err)) => {
            eprintln!("emx {command}: {err}");
            emit::<()>(&command, Err(&err));
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
