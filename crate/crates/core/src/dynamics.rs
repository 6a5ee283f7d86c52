//! Time evolution of the two-fluid system around an equilibrium.
//!
//! Primitive variables `(n, u, theta)` per species plus `(E, B)` are the
//! evolved unknowns. The log-pressure perturbation form exists alongside
//! (see [`crate::diagnostics`]) for cross-checks and energy diagnostics.
//! Constraints (Gauss law, `div B = 0`) are monitored, not projected;
//! optional Gauss cleaning is off by default.

use std::f64::consts::PI;
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, PerturbationState};
use crate::equilibrium::Equilibrium;
use crate::error::{EmxError, Result};
use crate::grid::{random_band_limited, Grid, ScalarField, VectorField};

/// Full primitive state at a point in time.
#[derive(Clone, Debug)]
pub struct PlasmaState {
    pub t: f64,
    pub n_e: ScalarField,
    pub u_e: VectorField,
    pub theta_e: ScalarField,
    pub n_i: ScalarField,
    pub u_i: VectorField,
    pub theta_i: ScalarField,
    pub e: VectorField,
    pub b: VectorField,
}

impl PlasmaState {
    pub fn grid(&self) -> &Grid {
        self.n_e.grid()
    }

    pub fn at_equilibrium(eq: &Equilibrium) -> PlasmaState {
        let grid = eq.grid();
        PlasmaState {
            t: 0.0,
            n_e: eq.nbar_e.clone(),
            u_e: VectorField::zeros(grid),
            theta_e: ScalarField::constant(grid, 1.0),
            n_i: eq.nbar_i.clone(),
            u_i: VectorField::zeros(grid),
            theta_i: ScalarField::constant(grid, 1.0),
            e: eq.ebar.clone(),
            b: VectorField::constant(grid, eq.bbar),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.n_e.is_finite()
            && self.u_e.is_finite()
            && self.theta_e.is_finite()
            && self.n_i.is_finite()
            && self.u_i.is_finite()
            && self.theta_i.is_finite()
            && self.e.is_finite()
            && self.b.is_finite()
    }

    /// Aggregate L2 size used by the blowup guard.
    pub fn gross_norm(&self) -> f64 {
        (self.n_e.l2_norm().powi(2)
            + self.u_e.l2_norm().powi(2)
            + self.theta_e.l2_norm().powi(2)
            + self.n_i.l2_norm().powi(2)
            + self.u_i.l2_norm().powi(2)
            + self.theta_i.l2_norm().powi(2)
            + self.e.l2_norm().powi(2)
            + self.b.l2_norm().powi(2))
        .sqrt()
    }

    fn check_positivity(&self, floor_n_e: f64, floor_n_i: f64, floor_theta: f64) -> Result<()> {
        let checks: [(&'static str, &ScalarField, f64); 4] = [
            ("n_e", &self.n_e, floor_n_e),
            ("n_i", &self.n_i, floor_n_i),
            ("theta_e", &self.theta_e, floor_theta),
            ("theta_i", &self.theta_i, floor_theta),
        ];
        for (name, field, floor) in checks {
            let (index, value) = field.argmin();
            if value <= floor {
                return Err(EmxError::PositivityViolation {
                    field: name,
                    index,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Time derivative of a [`PlasmaState`].
#[derive(Clone, Debug)]
pub struct StateTangent {
    pub n_e: ScalarField,
    pub u_e: VectorField,
    pub theta_e: ScalarField,
    pub n_i: ScalarField,
    pub u_i: VectorField,
    pub theta_i: ScalarField,
    pub e: VectorField,
    pub b: VectorField,
}

impl StateTangent {
    pub fn axpy(&mut self, c: f64, other: &StateTangent) {
        self.n_e.axpy(c, &other.n_e);
        self.u_e.axpy(c, &other.u_e);
        self.theta_e.axpy(c, &other.theta_e);
        self.n_i.axpy(c, &other.n_i);
        self.u_i.axpy(c, &other.u_i);
        self.theta_i.axpy(c, &other.theta_i);
        self.e.axpy(c, &other.e);
        self.b.axpy(c, &other.b);
    }

    pub fn linf(&self) -> f64 {
        self.n_e
            .linf()
            .max(self.u_e.linf())
            .max(self.theta_e.linf())
            .max(self.n_i.linf())
            .max(self.u_i.linf())
            .max(self.theta_i.linf())
            .max(self.e.linf())
            .max(self.b.linf())
    }
}

fn advance(s: &PlasmaState, dt: f64, k: &StateTangent) -> PlasmaState {
    let mut out = s.clone();
    out.t += dt;
    out.n_e.axpy(dt, &k.n_e);
    out.u_e.axpy(dt, &k.u_e);
    out.theta_e.axpy(dt, &k.theta_e);
    out.n_i.axpy(dt, &k.n_i);
    out.u_i.axpy(dt, &k.u_i);
    out.theta_i.axpy(dt, &k.theta_i);
    out.e.axpy(dt, &k.e);
    out.b.axpy(dt, &k.b);
    out
}

fn maybe_dealias_s(f: ScalarField, on: bool) -> ScalarField {
    if on {
        f.dealias()
    } else {
        f
    }
}

fn maybe_dealias_v(f: VectorField, on: bool) -> VectorField {
    if on {
        f.dealias()
    } else {
        f
    }
}

struct SpeciesRhs {
    dn: ScalarField,
    du: VectorField,
    dtheta: ScalarField,
    /// Mass flux `n u`, reused for the current in the Ampere law.
    flux: VectorField,
}

/// One species of the primitive system. `include_relaxation` lets the
/// Strang scheme strip the exactly-integrated `-u` and `-(theta-1)` terms.
fn species_rhs(
    n: &ScalarField,
    u: &VectorField,
    theta: &ScalarField,
    q: f64,
    e: &VectorField,
    b: &VectorField,
    dealias: bool,
    include_relaxation: bool,
) -> Result<SpeciesRhs> {
    let (idx, val) = n.argmin();
    if val <= 0.0 {
        return Err(EmxError::PositivityViolation {
            field: "n",
            index: idx,
            value: val,
        });
    }
    let (idx, val) = theta.argmin();
    if val <= 0.0 {
        return Err(EmxError::PositivityViolation {
            field: "theta",
            index: idx,
            value: val,
        });
    }

    // continuity: dn = -div(n u)
    let flux = maybe_dealias_v(
        VectorField::from_components(std::array::from_fn(|a| n.mul(u.component(a)))),
        dealias,
    );
    let dn = flux.divergence().scale(-1.0);

    // momentum: du = -(u.grad)u - grad(p)/n + q (E + u x B) [- u]
    let p = maybe_dealias_s(n.mul(theta), dealias);
    let grad_p = p.gradient();
    let grad_u: [VectorField; 3] = std::array::from_fn(|a| u.component(a).gradient());
    let mut du_components: [ScalarField; 3] = std::array::from_fn(|_| ScalarField::zeros(n.grid()));
    let uxb = maybe_dealias_v(u.cross(b), dealias);
    for a in 0..3 {
        // advection u . grad(u_a)
        let mut adv = u.component(0).mul(grad_u[a].component(0));
        adv.axpy(1.0, &u.component(1).mul(grad_u[a].component(1)));
        adv.axpy(1.0, &u.component(2).mul(grad_u[a].component(2)));
        let adv = maybe_dealias_s(adv, dealias);
        let mut du = adv.scale(-1.0);
        du.axpy(-1.0, &grad_p.component(a).zip(n, |gp, nn| gp / nn));
        du.axpy(q, e.component(a));
        du.axpy(q, uxb.component(a));
        if include_relaxation {
            du.axpy(-1.0, u.component(a));
        }
        du_components[a] = du;
    }

    // temperature: dtheta = -u.grad(theta) - theta div(u) + |u|^2/2 [- (theta-1)]
    let grad_theta = theta.gradient();
    let mut adv_t = u.component(0).mul(grad_theta.component(0));
    adv_t.axpy(1.0, &u.component(1).mul(grad_theta.component(1)));
    adv_t.axpy(1.0, &u.component(2).mul(grad_theta.component(2)));
    let adv_t = maybe_dealias_s(adv_t, dealias);
    let div_u = u.divergence();
    let theta_div_u = maybe_dealias_s(theta.mul(&div_u), dealias);
    let usq = maybe_dealias_s(u.norm_sq_field(), dealias);
    let mut dtheta = adv_t.scale(-1.0);
    dtheta.axpy(-1.0, &theta_div_u);
    dtheta.axpy(0.5, &usq);
    if include_relaxation {
        dtheta.axpy(-1.0, &theta.map(|v| v - 1.0));
    }

    Ok(SpeciesRhs {
        dn,
        du: VectorField::from_components(du_components),
        dtheta,
        flux,
    })
}

/// Right-hand side of the primitive system. `b_doping` enters only through
/// the Gauss constraint, which is not part of the evolution, so it is not
/// needed here; it is kept in [`constraint_residuals`].
pub fn rhs_primitive(s: &PlasmaState, dealias: bool) -> Result<StateTangent> {
    rhs_primitive_inner(s, dealias, true)
}

fn rhs_primitive_inner(s: &PlasmaState, dealias: bool, include_relaxation: bool) -> Result<StateTangent> {
    let e_rhs = species_rhs(
        &s.n_e, &s.u_e, &s.theta_e, -1.0, &s.e, &s.b, dealias, include_relaxation,
    )?;
    let i_rhs = species_rhs(
        &s.n_i, &s.u_i, &s.theta_i, 1.0, &s.e, &s.b, dealias, include_relaxation,
    )?;
    // Ampere: dE = curl(B) + n_e u_e - n_i u_i
    let mut de = s.b.curl();
    de.axpy(1.0, &e_rhs.flux);
    de.axpy(-1.0, &i_rhs.flux);
    // Faraday: dB = -curl(E)
    let db = s.e.curl().scale(-1.0);
    Ok(StateTangent {
        n_e: e_rhs.dn,
        u_e: e_rhs.du,
        theta_e: e_rhs.dtheta,
        n_i: i_rhs.dn,
        u_i: i_rhs.du,
        theta_i: i_rhs.dtheta,
        e: de,
        b: db,
    })
}

/// Right-hand side of the perturbation form: log-pressure `Q`, velocity,
/// temperature perturbation `Theta` per species, plus field perturbations
/// `(F, G)`. Mirrors the primitive dynamics under the change of variables.
pub fn rhs_perturbation(z: &PerturbationState, eq: &Equilibrium, dealias: bool) -> Result<PerturbationState> {
    let grid = eq.grid().clone();
    let bbar = VectorField::constant(&grid, eq.bbar);
    let mut out = z.clone();

    let mut fluxes: Vec<VectorField> = Vec::with_capacity(2);
    for (species, q_sign) in [(0usize, -1.0), (1usize, 1.0)] {
        let (qv, u, th) = z.species(species);
        let theta = th.map(|v| 1.0 + v);
        let (idx, val) = theta.argmin();
        if val <= 0.0 {
            return Err(EmxError::PositivityViolation {
                field: "theta",
                index: idx,
                value: val,
            });
        }
        let qbar = eq.log_pressure(species == 0);
        let grad_qbar = qbar.gradient();
        let grad_q = qv.gradient();
        let div_u = u.divergence();
        let usq = maybe_dealias_s(u.norm_sq_field(), dealias);

        // dQ = -u.grad Q - 2 div u - u.grad qbar + |u|^2/(2 theta) - Theta/theta
        let mut dq = ScalarField::zeros(&grid);
        for a in 0..3 {
            dq.axpy(-1.0, &maybe_dealias_s(u.component(a).mul(grad_q.component(a)), dealias));
            dq.axpy(-1.0, &maybe_dealias_s(u.component(a).mul(grad_qbar.component(a)), dealias));
        }
        dq.axpy(-2.0, &div_u);
        dq.axpy(1.0, &usq.zip(&theta, |s2, t| s2 / (2.0 * t)));
        dq.axpy(-1.0, &th.zip(&theta, |tt, t| tt / t));

        // du = -(u.grad)u - theta grad Q - Theta grad qbar + q (F + u x (Bbar+G)) - u
        let btot = bbar.add(z.g());
        let uxb = maybe_dealias_v(u.cross(&btot), dealias);
        let grad_u: [VectorField; 3] = std::array::from_fn(|a| u.component(a).gradient());
        let mut du_components: [ScalarField; 3] =
            std::array::from_fn(|_| ScalarField::zeros(&grid));
        for a in 0..3 {
            let mut adv = u.component(0).mul(grad_u[a].component(0));
            adv.axpy(1.0, &u.component(1).mul(grad_u[a].component(1)));
            adv.axpy(1.0, &u.component(2).mul(grad_u[a].component(2)));
            let adv = maybe_dealias_s(adv, dealias);
            let mut du = adv.scale(-1.0);
            du.axpy(-1.0, &maybe_dealias_s(theta.mul(grad_q.component(a)), dealias));
            du.axpy(-1.0, &maybe_dealias_s(th.mul(grad_qbar.component(a)), dealias));
            du.axpy(q_sign, z.f().component(a));
            du.axpy(q_sign, uxb.component(a));
            du.axpy(-1.0, u.component(a));
            du_components[a] = du;
        }

        // dTheta = -u.grad Theta - theta div u + |u|^2/2 - Theta
        let grad_th = th.gradient();
        let mut dth = ScalarField::zeros(&grid);
        for a in 0..3 {
            dth.axpy(-1.0, &maybe_dealias_s(u.component(a).mul(grad_th.component(a)), dealias));
        }
        dth.axpy(-1.0, &maybe_dealias_s(theta.mul(&div_u), dealias));
        dth.axpy(0.5, &usq);
        dth.axpy(-1.0, th);

        // current contribution: n = exp(qbar + Q) / theta
        let n = qv
            .zip(&qbar, |a, b| (a + b).exp())
            .zip(&theta, |p, t| p / t);
        let flux = maybe_dealias_v(
            VectorField::from_components(std::array::from_fn(|a| n.mul(u.component(a)))),
            dealias,
        );
        fluxes.push(flux);

        out.set_species(species, dq, VectorField::from_components(du_components), dth);
    }

    // dF = curl G + n_e u_e - n_i u_i ; dG = -curl F
    let mut df = z.g().curl();
    df.axpy(1.0, &fluxes[0]);
    df.axpy(-1.0, &fluxes[1]);
    let dg = z.f().curl().scale(-1.0);
    out.set_fields(df, dg);
    Ok(out)
}

/// Recipe for building a small divergence-compatible initial perturbation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Sup-norm scale applied to every perturbed field.
    pub amplitude: f64,
    /// Highest excited wavenumber per axis for the random recipe.
    pub kmax: usize,
    /// Explicit single-mode recipe instead of the random one.
    #[serde(default)]
    pub modes: Option<Vec<ModeSpec>>,
}

/// One cosine mode on a named field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeSpec {
    /// One of: n_e, n_i, theta_e, theta_i, u_e_x.., u_i_z, b_x, b_y, b_z.
    pub field: String,
    pub k: [i64; 3],
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Build compatible initial data: densities/velocities/temperatures from
/// the recipe, `B0 = Bbar + (divergence-free part)`, and `E0` corrected by
/// a potential so the Gauss constraint holds to solver precision.
pub fn make_initial_data(
    eq: &Equilibrium,
    spec: &PerturbationSpec,
    seed: u64,
    positivity_floor: f64,
) -> Result<PlasmaState> {
    if spec.amplitude < 0.0 {
        return Err(EmxError::Validation {
            key: "amplitude".into(),
            constraint: "must be non-negative".into(),
        });
    }
    let grid = eq.grid().clone();
    let mut state = PlasmaState::at_equilibrium(eq);
    if spec.amplitude > 0.0 {
        match &spec.modes {
            Some(modes) => {
                for m in modes {
                    let delta = ScalarField::from_fn(&grid, |x| {
                        let arg = 2.0 * PI
                            * (m.k[0] as f64 * x[0] + m.k[1] as f64 * x[1] + m.k[2] as f64 * x[2]);
                        spec.amplitude * m.amplitude * (arg + m.phase).cos()
                    });
                    apply_mode(&mut state, &m.field, &delta)?;
                }
            }
            None => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let amp = spec.amplitude;
                let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                    random_band_limited(&grid, spec.kmax, amp, rng)
                };
                state.n_e.axpy(1.0, &draw(&mut rng));
                state.n_i.axpy(1.0, &draw(&mut rng));
                for a in 0..3 {
                    state.u_e.component_mut(a).axpy(1.0, &draw(&mut rng));
                    state.u_i.component_mut(a).axpy(1.0, &draw(&mut rng));
                }
                state.theta_e.axpy(1.0, &draw(&mut rng));
                state.theta_i.axpy(1.0, &draw(&mut rng));
                let b_free =
                    VectorField::from_components(std::array::from_fn(|_| draw(&mut rng)));
                state.b.axpy(1.0, &b_free.leray_project());
            }
        }
        // Gauss-compatible electric field: E0 = Ebar + grad(psi0) with
        // lap(psi0) = (n_i - n_e + b) - div(Ebar)
        let rho = state.n_i.sub(&state.n_e).add(eq.doping.field());
        let src = rho.sub(&eq.ebar.divergence());
        let mean = src.mean();
        let psi0 = src.poisson_solve_mean_zero().map_err(|e| match e {
            EmxError::NonZeroMean { .. } => EmxError::NonNeutral(mean),
            other => other,
        })?;
        state.e = eq.ebar.add(&psi0.gradient());
    }

    let floor_n_e = positivity_floor * eq.nbar_e.min();
    let floor_n_i = positivity_floor * eq.nbar_i.min();
    let floor_theta = positivity_floor;
    state.check_positivity(floor_n_e, floor_n_i, floor_theta)?;
    Ok(state)
}

fn apply_mode(state: &mut PlasmaState, field: &str, delta: &ScalarField) -> Result<()> {
    let target: &mut ScalarField = match field {
        "n_e" => &mut state.n_e,
        "n_i" => &mut state.n_i,
        "theta_e" => &mut state.theta_e,
        "theta_i" => &mut state.theta_i,
        "u_e_x" => state.u_e.component_mut(0),
        "u_e_y" => state.u_e.component_mut(1),
        "u_e_z" => state.u_e.component_mut(2),
        "u_i_x" => state.u_i.component_mut(0),
        "u_i_y" => state.u_i.component_mut(1),
        "u_i_z" => state.u_i.component_mut(2),
        "b_x" => state.b.component_mut(0),
        "b_y" => state.b.component_mut(1),
        "b_z" => state.b.component_mut(2),
        other => {
            return Err(EmxError::Validation {
                key: "perturbation.modes.field".into(),
                constraint: format!("unknown field `{other}`"),
            })
        }
    };
    target.axpy(1.0, delta);
    // magnetic modes must stay divergence-free
    if field.starts_with("b_") {
        state.b = state.b.leray_project();
    }
    Ok(())
}

/// Time integration scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Classical four-stage Runge-Kutta on the full right-hand side.
    #[serde(rename = "rk4")]
    Rk4,
    /// Strang splitting: exact half-steps of the linear relaxation around
    /// an RK4 step of the remaining terms.
    #[serde(rename = "strang-exact-relaxation")]
    StrangExactRelaxation,
}

impl std::str::FromStr for Scheme {
    type Err = EmxError;
    fn from_str(s: &str) -> Result<Scheme> {
        match s {
            "rk4" => Ok(Scheme::Rk4),
            "strang-exact-relaxation" => Ok(Scheme::StrangExactRelaxation),
            other => Err(EmxError::Validation {
                key: "scheme".into(),
                constraint: format!("unknown scheme `{other}`"),
            }),
        }
    }
}

fn rk4_step(s: &PlasmaState, dt: f64, dealias: bool, include_relaxation: bool) -> Result<PlasmaState> {
    let k1 = rhs_primitive_inner(s, dealias, include_relaxation)?;
    let k2 = rhs_primitive_inner(&advance(s, 0.5 * dt, &k1), dealias, include_relaxation)?;
    let k3 = rhs_primitive_inner(&advance(s, 0.5 * dt, &k2), dealias, include_relaxation)?;
    let k4 = rhs_primitive_inner(&advance(s, dt, &k3), dealias, include_relaxation)?;
    let mut k = k1;
    k.axpy(2.0, &k2);
    k.axpy(2.0, &k3);
    k.axpy(1.0, &k4);
    let mut out = advance(s, dt / 6.0, &k);
    out.t = s.t + dt;
    Ok(out)
}

fn relax_half(s: &mut PlasmaState, dt: f64) {
    let decay = (-dt / 2.0).exp();
    s.u_e.scale_in_place(decay);
    s.u_i.scale_in_place(decay);
    for th in [&mut s.theta_e, &mut s.theta_i] {
        for v in th.data_mut() {
            *v = 1.0 + (*v - 1.0) * decay;
        }
    }
}

/// Advance one step. The caller is responsible for the blowup guard
/// relative to the initial state; non-finite output is reported here.
pub fn step(s: &PlasmaState, dt: f64, scheme: Scheme, dealias: bool) -> Result<PlasmaState> {
    assert!(dt > 0.0, "dt must be positive");
    let out = match scheme {
        Scheme::Rk4 => rk4_step(s, dt, dealias, true)?,
        Scheme::StrangExactRelaxation => {
            let mut half = s.clone();
            relax_half(&mut half, dt);
            let mut out = rk4_step(&half, dt, dealias, false)?;
            relax_half(&mut out, dt);
            out
        }
    };
    if !out.is_finite() {
        return Err(EmxError::NumericalBlowup(format!(
            "non-finite field after step to t = {}",
            out.t
        )));
    }
    Ok(out)
}

/// L2 norms of the Gauss-law defect and of `div B`.
pub fn constraint_residuals(s: &PlasmaState, b_doping: &ScalarField) -> (f64, f64) {
    let rho = s.n_i.sub(&s.n_e).add(b_doping);
    let gauss = s.e.divergence().sub(&rho).l2_norm();
    let div_b = s.b.divergence().l2_norm();
    (gauss, div_b)
}

/// Restore the Gauss law exactly: `E <- E + grad(invlap(rho - div E))`.
pub fn gauss_clean(s: &mut PlasmaState, b_doping: &ScalarField) -> Result<()> {
    let rho = s.n_i.sub(&s.n_e).add(b_doping);
    let defect = rho.sub(&s.e.divergence());
    let mean = defect.mean();
    let psi = defect.poisson_solve_mean_zero().map_err(|e| match e {
        EmxError::NonZeroMean { .. } => EmxError::NonNeutral(mean),
        other => other,
    })?;
    s.e.axpy(1.0, &psi.gradient());
    Ok(())
}

/// Simulation parameters (grid and equilibrium come from the caller).
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub dealias: bool,
    /// 0 = never clean.
    pub gauss_clean_every: usize,
    /// Diagnostics cadence in time units.
    pub cadence: f64,
    /// Checkpoint cadence in steps; 0 = never.
    pub checkpoint_every: usize,
    /// Positivity abort threshold as a fraction of the equilibrium floor.
    pub positivity_floor: f64,
}

impl SimConfig {
    /// Acoustic CFL estimate; the caller should warn when `dt` exceeds it.
    pub fn cfl_limit(&self, grid: &Grid, s: &PlasmaState) -> f64 {
        let theta_max = s.theta_e.max().max(s.theta_i.max());
        let u_max = s.u_e.linf().max(s.u_i.linf());
        let speed = ((2.0 * theta_max).sqrt() + u_max).max(1.0);
        0.5 / (2.0 * PI * grid.n_per_axis() as f64 * speed)
    }
}

/// One diagnostics row of the NDJSON stream. Field order is fixed by the
/// struct, which keeps the stream byte-reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagRow {
    pub step: usize,
    pub t: f64,
    /// `H^3` aggregate of `(N, u, Theta)` over both species.
    pub norm_nut_s3: f64,
    /// `H^2` norm of `F = E - Ebar`.
    pub norm_f_s2: f64,
    /// `H^2` norm of `G = B - Bbar`.
    pub norm_g_s2: f64,
    /// `H^1` norm of `dB/dt = -curl E`.
    pub norm_dtb_s1: f64,
    /// `H^1` norm of `grad B`.
    pub norm_gradb_s1: f64,
    /// L2 aggregate of the full perturbation vector.
    pub norm_z_s0: f64,
    /// Symmetrizer-weighted quadratic energy (first derivative order).
    pub e_quad: f64,
    pub gauss_residual: f64,
    pub div_b_residual: f64,
    pub min_n: f64,
    pub min_theta: f64,
}

/// Where diagnostics rows and checkpoints go during a run.
pub trait RunSink {
    fn emit(&mut self, row: &DiagRow) -> Result<()>;
    fn checkpoint(&mut self, step: usize, state: &PlasmaState) -> Result<()> {
        let _ = (step, state);
        Ok(())
    }
}

/// Sink that keeps everything in memory; used by tests.
#[derive(Default)]
pub struct MemorySink {
    pub rows: Vec<DiagRow>,
}

impl RunSink for MemorySink {
    fn emit(&mut self, row: &DiagRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Summary of a completed (or aborted) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: usize,
    pub final_t: f64,
    pub wall_secs: f64,
    pub max_gauss_residual: f64,
    pub max_div_b_residual: f64,
    pub min_n: f64,
    pub min_theta: f64,
    pub final_norm_z: f64,
}

pub fn diag_row(step: usize, s: &PlasmaState, eq: &Equilibrium) -> Result<DiagRow> {
    let z = diagnostics::perturbation_of(s, eq)?;
    let aggregate = |vals: &[f64]| vals.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_nut_s3 = aggregate(&[
        z.n_nu(0).sobolev_norm(3),
        z.species(0).1.sobolev_norm(3),
        z.species(0).2.sobolev_norm(3),
        z.n_nu(1).sobolev_norm(3),
        z.species(1).1.sobolev_norm(3),
        z.species(1).2.sobolev_norm(3),
    ]);
    let dtb = s.e.curl().scale(-1.0);
    let grad_b: Vec<f64> = (0..3)
        .map(|a| s.b.component(a).gradient().sobolev_norm(1))
        .collect();
    let norm_z_s0 = aggregate(&[
        z.n_nu(0).l2_norm(),
        z.species(0).1.l2_norm(),
        z.species(0).2.l2_norm(),
        z.n_nu(1).l2_norm(),
        z.species(1).1.l2_norm(),
        z.species(1).2.l2_norm(),
        z.f().l2_norm(),
        z.g().l2_norm(),
    ]);
    let (gauss, div_b) = constraint_residuals(s, eq.doping.field());
    Ok(DiagRow {
        step,
        t: s.t,
        norm_nut_s3,
        norm_f_s2: z.f().sobolev_norm(2),
        norm_g_s2: z.g().sobolev_norm(2),
        norm_dtb_s1: dtb.sobolev_norm(1),
        norm_gradb_s1: aggregate(&grad_b),
        norm_z_s0,
        e_quad: diagnostics::quadratic_energy(&z, s, 1)?,
        gauss_residual: gauss,
        div_b_residual: div_b,
        min_n: s.n_e.min().min(s.n_i.min()),
        min_theta: s.theta_e.min().min(s.theta_i.min()),
    })
}

/// Advance the initial state to `t_end`, emitting diagnostics and
/// checkpoints through the sink. On a numerical failure the error is
/// returned together with a final checkpoint (step index in the error
/// context) for post-mortem.
pub fn simulate(
    cfg: &SimConfig,
    eq: &Equilibrium,
    init: PlasmaState,
    sink: &mut dyn RunSink,
) -> Result<(RunRecord, PlasmaState)> {
    let started = Instant::now();
    let grid = eq.grid().clone();
    let n_steps = (cfg.t_end / cfg.dt).round() as usize;
    let emit_every = ((cfg.cadence / cfg.dt).round() as usize).max(1);
    let floor_n_e = cfg.positivity_floor * eq.nbar_e.min();
    let floor_n_i = cfg.positivity_floor * eq.nbar_i.min();

    let initial_norm = init.gross_norm();
    let mut state = init;
    let mut max_gauss = 0.0f64;
    let mut max_div_b = 0.0f64;
    let mut min_n = f64::INFINITY;
    let mut min_theta = f64::INFINITY;

    let record_step = |state: &PlasmaState,
                           step: usize,
                           sink: &mut dyn RunSink,
                           max_gauss: &mut f64,
                           max_div_b: &mut f64|
     -> Result<()> {
        let row = diag_row(step, state, eq)?;
        *max_gauss = max_gauss.max(row.gauss_residual);
        *max_div_b = max_div_b.max(row.div_b_residual);
        sink.emit(&row)
    };

    record_step(&state, 0, sink, &mut max_gauss, &mut max_div_b)?;
    let mut last_emitted = 0usize;

    for step_index in 1..=n_steps {
        let result = (|| -> Result<PlasmaState> {
            let next = step(&state, cfg.dt, cfg.scheme, cfg.dealias)?;
            next.check_positivity(floor_n_e, floor_n_i, cfg.positivity_floor)?;
            if next.gross_norm() > 1e6 * initial_norm.max(1e-30) {
                return Err(EmxError::NumericalBlowup(format!(
                    "norm exceeded 1e6x initial at step {step_index}"
                )));
            }
            Ok(next)
        })();
        state = match result {
            Ok(next) => next,
            Err(err) => {
                // post-mortem checkpoint before propagating
                let _ = sink.checkpoint(step_index, &state);
                return Err(err);
            }
        };
        if cfg.gauss_clean_every > 0 && step_index % cfg.gauss_clean_every == 0 {
            gauss_clean(&mut state, eq.doping.field())?;
        }
        min_n = min_n.min(state.n_e.min()).min(state.n_i.min());
        min_theta = min_theta.min(state.theta_e.min()).min(state.theta_i.min());
        if step_index % emit_every == 0 || step_index == n_steps {
            if step_index != last_emitted {
                record_step(&state, step_index, sink, &mut max_gauss, &mut max_div_b)?;
                last_emitted = step_index;
            }
        }
        if cfg.checkpoint_every > 0 && step_index % cfg.checkpoint_every == 0 {
            sink.checkpoint(step_index, &state)?;
        }
    }

    let final_row = diag_row(n_steps, &state, eq)?;
    let record = RunRecord {
        steps: n_steps,
        final_t: state.t,
        wall_secs: started.elapsed().as_secs_f64(),
        max_gauss_residual: max_gauss,
        max_div_b_residual: max_div_b,
        min_n: min_n.min(state.n_e.min()).min(state.n_i.min()),
        min_theta: min_theta.min(state.theta_e.min()).min(state.theta_i.min()),
        final_norm_z: final_row.norm_z_s0,
    };
    let _ = grid;
    Ok((record, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::perturbation_of;
    use crate::equilibrium::{solve_equilibrium, DopingProfile};

    fn homogeneous_eq(n: usize, dims: usize, beta: f64) -> Equilibrium {
        let grid = Grid::new(dims, n).unwrap();
        let doping = DopingProfile::constant(&grid, beta).unwrap();
        solve_equilibrium(&doping, 1.0, [0.0; 3], 1e-13).unwrap()
    }

    fn cosine_eq(n: usize, beta: f64, eps: f64) -> Equilibrium {
        let grid = Grid::new(1, n).unwrap();
        let doping = DopingProfile::cosine(&grid, beta, eps).unwrap();
        solve_equilibrium(&doping, 1.0, [0.0; 3], 1e-12).unwrap()
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_the_primitive_rhs() {
        for eq in [homogeneous_eq(16, 1, 1.0), cosine_eq(64, 0.5, 0.2)] {
            let s = PlasmaState::at_equilibrium(&eq);
            let tang = rhs_primitive(&s, true).unwrap();
            assert!(tang.linf() <= 1e-10, "tangent {}", tang.linf());
        }
    }

    #[test]
    fn equilibrium_is_unchanged_after_many_steps() {
        let eq = cosine_eq(32, 0.5, 0.1);
        let s0 = PlasmaState::at_equilibrium(&eq);
        let mut s = s0.clone();
        for _ in 0..100 {
            s = step(&s, 1e-3, Scheme::Rk4, true).unwrap();
        }
        let drift = s
            .n_e
            .sub(&s0.n_e)
            .linf()
            .max(s.u_e.linf())
            .max(s.theta_e.sub(&s0.theta_e).linf())
            .max(s.e.sub(&s0.e).linf())
            .max(s.b.linf());
        assert!(drift <= 1e-9, "drift {drift}");
    }

    #[test]
    fn uniform_state_rhs_is_pure_relaxation() {
        // n = const matching a constant doping, u = 0, theta = 1 + t0,
        // E = B = 0: only the temperature relaxes.
        let eq = homogeneous_eq(16, 1, 1.0);
        let mut s = PlasmaState::at_equilibrium(&eq);
        let t0 = 0.25;
        s.theta_e = s.theta_e.map(|_| 1.0 + t0);
        s.theta_i = s.theta_i.map(|_| 1.0 + t0);
        let tang = rhs_primitive(&s, true).unwrap();
        assert!((tang.theta_e.max() + t0).abs() <= 1e-13);
        assert!((tang.theta_i.max() + t0).abs() <= 1e-13);
        assert!(tang.n_e.linf().max(tang.n_i.linf()) <= 1e-13);
        assert!(tang.u_e.linf().max(tang.u_i.linf()) <= 1e-13);
        assert!(tang.e.linf().max(tang.b.linf()) <= 1e-13);
    }

    #[test]
    fn uniform_relaxation_matches_exact_exponential() {
        let eq = homogeneous_eq(8, 1, 1.0);
        let t0 = 0.3;
        for scheme in [Scheme::Rk4, Scheme::StrangExactRelaxation] {
            let mut s = PlasmaState::at_equilibrium(&eq);
            s.theta_e = s.theta_e.map(|_| 1.0 + t0);
            s.theta_i = s.theta_i.map(|_| 1.0 + t0);
            for _ in 0..100 {
                s = step(&s, 1e-2, scheme, true).unwrap();
            }
            let ratio = (s.theta_e.max() - 1.0) / t0;
            let err = (ratio - (-1.0f64).exp()).abs();
            let tol = match scheme {
                Scheme::Rk4 => 1e-8,
                // the splitting integrates this term exactly
                Scheme::StrangExactRelaxation => 1e-14,
            };
            assert!(err <= tol, "{scheme:?}: error {err}");
        }
    }

    #[test]
    fn rk4_observed_order_is_at_least_fourth() {
        let eq = cosine_eq(32, 1.0, 0.1);
        let spec = PerturbationSpec {
            amplitude: 1e-2,
            kmax: 2,
            modes: None,
        };
        let init = make_initial_data(&eq, &spec, 11, 0.55).unwrap();
        let run = |dt: f64| -> PlasmaState {
            let mut s = init.clone();
            let steps = (0.2 / dt).round() as usize;
            for _ in 0..steps {
                s = step(&s, dt, Scheme::Rk4, true).unwrap();
            }
            s
        };
        let reference = run(1.25e-4);
        let err = |s: &PlasmaState| -> f64 {
            s.n_e
                .sub(&reference.n_e)
                .linf()
                .max(s.u_e.sub(&reference.u_e).linf())
                .max(s.e.sub(&reference.e).linf())
        };
        let e1 = err(&run(4e-3));
        let e2 = err(&run(2e-3));
        let order = (e1 / e2).log2();
        assert!(order >= 3.8, "observed order {order}");
    }

    #[test]
    fn mass_is_conserved_per_species() {
        let eq = cosine_eq(32, 0.5, 0.2);
        let spec = PerturbationSpec {
            amplitude: 1e-2,
            kmax: 3,
            modes: None,
        };
        let mut s = make_initial_data(&eq, &spec, 3, 0.55).unwrap();
        let (m_e, m_i) = (s.n_e.mean(), s.n_i.mean());
        for _ in 0..20 {
            s = step(&s, 1e-3, Scheme::Rk4, true).unwrap();
        }
        assert!((s.n_e.mean() - m_e).abs() <= 1e-13);
        assert!((s.n_i.mean() - m_i).abs() <= 1e-13);
    }

    #[test]
    fn initial_data_is_deterministic_and_gauss_compatible() {
        let eq = cosine_eq(32, 0.5, 0.2);
        let spec = PerturbationSpec {
            amplitude: 1e-3,
            kmax: 3,
            modes: None,
        };
        let a = make_initial_data(&eq, &spec, 42, 0.55).unwrap();
        let b = make_initial_data(&eq, &spec, 42, 0.55).unwrap();
        assert_eq!(a.n_e.data(), b.n_e.data());
        assert_eq!(a.e.component(0).data(), b.e.component(0).data());
        let c = make_initial_data(&eq, &spec, 43, 0.55).unwrap();
        assert!(a.n_e.sub(&c.n_e).linf() > 0.0);

        let (gauss, div_b) = constraint_residuals(&a, eq.doping.field());
        assert!(gauss <= 1e-11, "gauss {gauss}");
        assert!(div_b <= 1e-12, "div B {div_b}");
    }

    #[test]
    fn initial_data_rejects_amplitudes_violating_positivity() {
        let eq = cosine_eq(16, 0.5, 0.1);
        let spec = PerturbationSpec {
            amplitude: 0.6,
            kmax: 2,
            modes: None,
        };
        match make_initial_data(&eq, &spec, 1, 0.55) {
            Err(EmxError::PositivityViolation { .. }) => {}
            other => panic!("expected positivity violation, got {other:?}"),
        }
    }

    #[test]
    fn explicit_mode_recipe_hits_the_named_field() {
        let eq = homogeneous_eq(16, 1, 1.0);
        let spec = PerturbationSpec {
            amplitude: 1e-3,
            kmax: 0,
            modes: Some(vec![ModeSpec {
                field: "theta_e".into(),
                k: [1, 0, 0],
                amplitude: 1.0,
                phase: 0.0,
            }]),
        };
        let s = make_initial_data(&eq, &spec, 0, 0.55).unwrap();
        assert!((s.theta_e.max() - 1.0 - 1e-3).abs() <= 1e-12);
        assert!(s.theta_i.sub(&ScalarField::constant(s.grid(), 1.0)).linf() <= 1e-14);
        let bad = PerturbationSpec {
            amplitude: 1e-3,
            kmax: 0,
            modes: Some(vec![ModeSpec {
                field: "nope".into(),
                k: [1, 0, 0],
                amplitude: 1.0,
                phase: 0.0,
            }]),
        };
        assert!(matches!(
            make_initial_data(&eq, &bad, 0, 0.55),
            Err(EmxError::Validation { .. })
        ));
    }

    #[test]
    fn perturbation_rhs_agrees_with_the_primitive_pushforward() {
        // chain rule: dQ = (theta dn + n dtheta) / p, dTheta = dtheta,
        // dF = dE, dG = dB.
        let eq = cosine_eq(32, 0.5, 0.2);
        let spec = PerturbationSpec {
            amplitude: 1e-3,
            kmax: 3,
            modes: None,
        };
        let s = make_initial_data(&eq, &spec, 9, 0.55).unwrap();
        let tang = rhs_primitive(&s, true).unwrap();
        let z = perturbation_of(&s, &eq).unwrap();
        let dz = rhs_perturbation(&z, &eq, true).unwrap();

        let mut worst = 0.0f64;
        for (species, (nf, thf, dn, dth, du)) in [
            (&s.n_e, &s.theta_e, &tang.n_e, &tang.theta_e, &tang.u_e),
            (&s.n_i, &s.theta_i, &tang.n_i, &tang.theta_i, &tang.u_i),
        ]
        .into_iter()
        .enumerate()
        {
            let (dq_z, du_z, dth_z) = dz.species(species);
            let dq_expected = ScalarField::from_vec(
                s.grid(),
                (0..nf.data().len())
                    .map(|i| {
                        let p = nf.data()[i] * thf.data()[i];
                        (thf.data()[i] * dn.data()[i] + nf.data()[i] * dth.data()[i]) / p
                    })
                    .collect(),
            );
            worst = worst
                .max(dq_z.sub(&dq_expected).linf())
                .max(du_z.sub(du).linf())
                .max(dth_z.sub(dth).linf());
        }
        worst = worst
            .max(dz.f().sub(&tang.e).linf())
            .max(dz.g().sub(&tang.b).linf());
        assert!(worst <= 1e-9, "formulation discrepancy {worst}");
    }

    #[test]
    fn gauss_cleaning_restores_the_constraint() {
        let eq = cosine_eq(32, 0.5, 0.2);
        let spec = PerturbationSpec {
            amplitude: 1e-2,
            kmax: 3,
            modes: None,
        };
        let mut s = make_initial_data(&eq, &spec, 5, 0.55).unwrap();
        // spoil the electric field with a gradient
        let bump = ScalarField::from_fn(s.grid(), |x| 1e-3 * (2.0 * PI * x[0]).sin());
        s.e.axpy(1.0, &bump.gradient());
        let (before, _) = constraint_residuals(&s, eq.doping.field());
        assert!(before > 1e-4);
        gauss_clean(&mut s, eq.doping.field()).unwrap();
        let (after, _) = constraint_residuals(&s, eq.doping.field());
        assert!(after <= 1e-12, "after cleaning {after}");
    }

    #[test]
    fn scheme_names_parse() {
        assert_eq!("rk4".parse::<Scheme>().unwrap(), Scheme::Rk4);
        assert_eq!(
            "strang-exact-relaxation".parse::<Scheme>().unwrap(),
            Scheme::StrangExactRelaxation
        );
        assert!("euler".parse::<Scheme>().is_err());
    }

    #[test]
    fn simulate_emits_rows_and_is_deterministic() {
        let eq = cosine_eq(32, 0.5, 0.2);
        let spec = PerturbationSpec {
            amplitude: 1e-3,
            kmax: 3,
            modes: None,
        };
        let cfg = SimConfig {
            dt: 1e-3,
            t_end: 0.05,
            scheme: Scheme::Rk4,
            dealias: true,
            gauss_clean_every: 0,
            cadence: 0.01,
            checkpoint_every: 0,
            positivity_floor: 0.55,
        };
        let run = || {
            let init = make_initial_data(&eq, &spec, 7, cfg.positivity_floor).unwrap();
            let mut sink = MemorySink::default();
            let (record, state) = simulate(&cfg, &eq, init, &mut sink).unwrap();
            (record, state, sink)
        };
        let (record, state, sink) = run();
        assert_eq!(record.steps, 50);
        assert!((record.final_t - 0.05).abs() <= 1e-12);
        // step 0 plus one row per cadence interval (0.01 / 1e-3 = 10 steps)
        assert_eq!(sink.rows.len(), 6);
        assert_eq!(sink.rows.last().unwrap().step, 50);
        assert!(record.max_gauss_residual <= 1e-8);

        let (_, state2, sink2) = run();
        assert_eq!(state.n_e.data(), state2.n_e.data());
        let json = |rows: &[DiagRow]| {
            rows.iter()
                .map(|r| serde_json::to_string(r).unwrap())
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(json(&sink.rows), json(&sink2.rows));
    }

    #[test]
    fn simulate_aborts_on_blowup_with_a_postmortem_checkpoint() {
        let eq = homogeneous_eq(16, 1, 1.0);
        let spec = PerturbationSpec {
            amplitude: 0.4,
            kmax: 2,
            modes: None,
        };
        let init = make_initial_data(&eq, &spec, 2, 0.1).unwrap();
        let cfg = SimConfig {
            dt: 0.5, // far past the acoustic CFL limit
            t_end: 50.0,
            scheme: Scheme::Rk4,
            dealias: true,
            gauss_clean_every: 0,
            cadence: 1.0,
            checkpoint_every: 0,
            positivity_floor: 0.01,
        };
        let mut sink = MemorySink::default();
        let err = simulate(&cfg, &eq, init, &mut sink).unwrap_err();
        assert!(matches!(
            err,
            EmxError::NumericalBlowup(_) | EmxError::PositivityViolation { .. }
        ));
    }
}
