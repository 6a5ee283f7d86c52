//! Configuration, checkpointing, deterministic run orchestration, and
//! diagnostics streaming.
//!
//! Everything here is plumbing around the numerical core: a TOML run
//! configuration with key-precise validation, a bit-exact binary
//! checkpoint format, NDJSON diagnostics written from a background
//! thread, and the run / resume / diagnose drivers used by the CLI.

mod checkpoint;
mod config;
mod runner;

pub use checkpoint::{
    load_checkpoint, load_equilibrium_checkpoint, load_state_checkpoint,
    save_equilibrium_checkpoint, save_state_checkpoint, CheckpointHeader, CheckpointKind,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    load_config, parse_config, DopingConfig, DopingKind, EquilibriumConfig, GridConfig,
    OutputConfig, PerturbationConfig, RunConfig, TimeConfig,
};
pub use runner::{
    build_equilibrium, diagnose_run, resume_run, run_simulation, verify_algebra, DecayFitRow,
    NdjsonWriter, RunPaths,
};

use sha2::{Digest, Sha256};

/// Derive an independent sub-seed from the master seed and a fixed label
/// ("doping", "perturbation", "algebra"): the first eight little-endian
/// bytes of `sha256(master_le || label)`.
pub fn sub_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hex SHA-256 of a byte string; used to tie checkpoints to the resolved
/// configuration that produced them.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker-parallelism cap from `EMX_THREADS`, defaulting to the number of
/// available cores. The numerical kernels are single-threaded at desk
/// scale; the cap currently governs only the background writer queue, but
/// the variable is honored and echoed so runs record their environment.
pub fn thread_cap() -> usize {
    match std::env::var("EMX_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}
