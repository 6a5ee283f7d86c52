//! TOML run configuration with validation and resolved-config echoing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{PerturbationSpec, Scheme};
use crate::equilibrium::DopingProfile;
use crate::error::{EmxError, Result};
use crate::grid::Grid;

fn default_m_i() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-10
}
fn default_scheme() -> Scheme {
    Scheme::Rk4
}
fn default_dealias() -> bool {
    true
}
fn default_cadence() -> f64 {
    0.1
}
fn default_positivity_floor() -> f64 {
    0.55
}
fn default_kmax() -> usize {
    3
}

/// Full run description. Optional keys carry documented defaults; the
/// fully resolved form is echoed into the run directory so every artifact
/// records the exact parameters that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; sub-seeds are derived per labeled stream.
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    pub equilibrium: EquilibriumConfig,
    pub perturbation: PerturbationConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub n_per_axis: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub doping: DopingConfig,
    #[serde(default = "default_m_i")]
    pub m_i: f64,
    #[serde(default)]
    pub bbar: [f64; 3],
    #[serde(default = "default_tol")]
    pub tol: f64,
}

/// Doping profile `b(x) > 0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DopingConfig {
    pub kind: DopingKind,
    /// Mean level.
    pub beta: f64,
    /// Variation amplitude (ignored for `constant`).
    #[serde(default)]
    pub eps: f64,
    /// Band limit for the `random` kind.
    #[serde(default = "default_kmax")]
    pub kmax: usize,
    /// Positivity floor the profile must stay above.
    #[serde(default)]
    pub floor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DopingKind {
    Constant,
    Cosine,
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub amplitude: f64,
    #[serde(default = "default_kmax")]
    pub kmax: usize,
    #[serde(default)]
    pub modes: Option<Vec<crate::dynamics::ModeSpec>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_dealias")]
    pub dealias: bool,
    /// Steps between Gauss-law cleanings; 0 disables cleaning.
    #[serde(default)]
    pub gauss_clean_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Diagnostics cadence in time units.
    pub cadence: f64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Positivity abort threshold as a fraction of the equilibrium floor.
    pub positivity_floor: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            cadence: default_cadence(),
            checkpoint_every: 0,
            positivity_floor: default_positivity_floor(),
        }
    }
}

fn invalid(key: &str, constraint: &str) -> EmxError {
    EmxError::Validation {
        key: key.to_string(),
        constraint: constraint.to_string(),
    }
}

impl RunConfig {
    /// Check every numeric constraint; called by both loaders so a config
    /// is either fully valid or rejected with the offending key.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(1..=3).contains(&g.d) {
            return Err(invalid("grid.d", "must be 1, 2, or 3"));
        }
        if g.n_per_axis < 8 || !g.n_per_axis.is_power_of_two() {
            return Err(invalid("n_per_axis", "power of two, at least 8"));
        }
        let dp = &self.equilibrium.doping;
        if dp.beta <= 0.0 {
            return Err(invalid("equilibrium.doping.beta", "must be positive"));
        }
        if dp.eps < 0.0 {
            return Err(invalid("equilibrium.doping.eps", "must be non-negative"));
        }
        if dp.floor < 0.0 {
            return Err(invalid("equilibrium.doping.floor", "must be non-negative"));
        }
        if self.equilibrium.m_i <= 0.0 {
            return Err(invalid("equilibrium.m_i", "must be positive"));
        }
        if self.equilibrium.tol <= 0.0 {
            return Err(invalid("equilibrium.tol", "must be positive"));
        }
        if self.perturbation.amplitude < 0.0 {
            return Err(invalid("amplitude", "non-negative"));
        }
        if self.time.dt <= 0.0 {
            return Err(invalid("time.dt", "must be positive"));
        }
        if self.time.t_end < 0.0 {
            return Err(invalid("time.t_end", "must be non-negative"));
        }
        if self.output.cadence <= 0.0 {
            return Err(invalid("output.cadence", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.output.positivity_floor) {
            return Err(invalid("output.positivity_floor", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.d, self.grid.n_per_axis)
    }

    /// Instantiate the doping profile; the `random` kind uses the
    /// "doping"-labeled sub-seed of the master seed.
    pub fn doping_profile(&self) -> Result<DopingProfile> {
        let grid = self.grid()?;
        let dp = &self.equilibrium.doping;
        let profile = match dp.kind {
            DopingKind::Constant => DopingProfile::constant(&grid, dp.beta),
            DopingKind::Cosine => DopingProfile::cosine(&grid, dp.beta, dp.eps),
            DopingKind::Random => DopingProfile::random(
                &grid,
                dp.beta,
                dp.eps,
                dp.kmax,
                super::sub_seed(self.seed, "doping"),
            ),
        }?;
        // a profile grazing the configured floor is rejected like a
        // non-positive one, with the realized minimum in the message
        let min_b = profile.field().min();
        if min_b <= dp.floor {
            return Err(EmxError::InvalidDoping { min_b });
        }
        Ok(profile)
    }

    pub fn perturbation_spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            amplitude: self.perturbation.amplitude,
            kmax: self.perturbation.kmax,
            modes: self.perturbation.modes.clone(),
        }
    }

    /// Serialized resolved form (all defaults filled in).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| EmxError::Format(e.to_string()))
    }
}

/// Parse and validate a configuration from TOML text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| EmxError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load, parse, and validate a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_config(&text)
}
