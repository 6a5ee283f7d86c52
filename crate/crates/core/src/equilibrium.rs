//! Non-constant steady states driven by a positive doping profile.
//!
//! With unit equilibrium temperature the force balance closes the densities
//! as `nbar_e = c_e exp(phibar)`, `nbar_i = c_i exp(-phibar)` with
//! `Ebar = -grad(phibar)`, which reduces the steady-state system to one
//! semilinear Poisson problem
//!
//! `-lap(phibar) = c_i exp(-phibar) - c_e exp(phibar) + b`.
//!
//! Mass normalization: the ion mass `M_i` is prescribed; the electron mass
//! is forced to `M_i + mean(b)` by global neutrality on the torus. The
//! solver is a damped Newton iteration on `phibar` with mass-preserving
//! density closures, CG inner solves preconditioned by `(1 - lap)^{-1}`,
//! and a damped Picard fallback if a Newton step fails to reduce the
//! residual.

use std::f64::consts::PI;

use rand::SeedableRng;

use crate::error::{EmxError, Result};
use crate::grid::{random_band_limited, Grid, ScalarField, VectorField};

/// Fixed background charge density; must be strictly positive.
#[derive(Clone, Debug)]
pub struct DopingProfile {
    field: ScalarField,
}

impl DopingProfile {
    pub fn new(field: ScalarField) -> Result<DopingProfile> {
        let min_b = field.min();
        if min_b <= 0.0 {
            return Err(EmxError::InvalidDoping { min_b });
        }
        Ok(DopingProfile { field })
    }

    pub fn constant(grid: &Grid, beta: f64) -> Result<DopingProfile> {
        DopingProfile::new(ScalarField::constant(grid, beta))
    }

    /// `b = beta + eps cos(2 pi x_1)`.
    pub fn cosine(grid: &Grid, beta: f64, eps: f64) -> Result<DopingProfile> {
        DopingProfile::new(ScalarField::from_fn(grid, |x| {
            beta + eps * (2.0 * PI * x[0]).cos()
        }))
    }

    /// `beta` plus a random band-limited bump of sup norm `eps`; the floor
    /// `beta - eps` must stay positive.
    pub fn random(grid: &Grid, beta: f64, eps: f64, kmax: usize, seed: u64) -> Result<DopingProfile> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = random_band_limited(grid, kmax, eps, &mut rng);
        for v in b.data_mut() {
            *v += beta;
        }
        DopingProfile::new(b)
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }
}

/// Steady state: positive densities, electrostatic field from a mean-zero
/// potential, constant magnetic field.
#[derive(Clone, Debug)]
pub struct Equilibrium {
    pub nbar_e: ScalarField,
    pub nbar_i: ScalarField,
    pub phibar: ScalarField,
    pub ebar: VectorField,
    pub bbar: [f64; 3],
    pub doping: DopingProfile,
    pub residual: f64,
}

impl Equilibrium {
    pub fn grid(&self) -> &Grid {
        self.nbar_e.grid()
    }

    /// Equilibrium log-pressure `ln(pbar) = ln(nbar)` (unit temperature).
    pub fn log_pressure(&self, electron: bool) -> ScalarField {
        if electron {
            self.nbar_e.map(f64::ln)
        } else {
            self.nbar_i.map(f64::ln)
        }
    }
}

/// Max-norms of the three steady-state identities:
/// `grad(ln nbar_e) + Ebar`, `grad(ln nbar_i) - Ebar`,
/// `div(Ebar) - (nbar_i - nbar_e + b)`.
pub fn equilibrium_residual(eq: &Equilibrium) -> (f64, f64, f64) {
    let grad_ln_e = eq.nbar_e.map(f64::ln).gradient();
    let grad_ln_i = eq.nbar_i.map(f64::ln).gradient();
    let r_force_e = grad_ln_e.add(&eq.ebar).linf();
    let r_force_i = grad_ln_i.sub(&eq.ebar).linf();
    let rho = eq.nbar_i.sub(&eq.nbar_e).add(eq.doping.field());
    let r_gauss = eq.ebar.divergence().sub(&rho).linf();
    (r_force_e, r_force_i, r_gauss)
}

/// Densities from the mass-preserving closures for a given potential.
fn densities(phi: &ScalarField, m_e: f64, m_i: f64) -> (ScalarField, ScalarField) {
    let exp_p = phi.map(f64::exp);
    let exp_m = phi.map(|v| (-v).exp());
    let n_e = exp_p.scale(m_e / exp_p.mean());
    let n_i = exp_m.scale(m_i / exp_m.mean());
    (n_e, n_i)
}

/// Nonlinear Gauss residual `lap(phi) + n_i - n_e + b` for the closure
/// densities.
fn gauss_residual(phi: &ScalarField, b: &ScalarField, m_e: f64, m_i: f64) -> ScalarField {
    let (n_e, n_i) = densities(phi, m_e, m_i);
    phi.laplacian().add(&n_i).sub(&n_e).add(b)
}

/// Solve `(-lap + w) x = rhs` by preconditioned CG with the spectral
/// preconditioner `(1 - lap)^{-1}`. `w` is a positive weight field.
fn pcg_helmholtz(rhs: &ScalarField, w: &ScalarField, rel_tol: f64, max_iter: usize) -> ScalarField {
    let apply = |x: &ScalarField| -> ScalarField { x.laplacian().scale(-1.0).add(&w.mul(x)) };
    let precond = helmholtz_inverse_unit;
    let mut x = ScalarField::zeros(rhs.grid());
    let mut r = rhs.clone();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let rhs_norm = rhs.l2_norm().max(1e-300);
    for _ in 0..max_iter {
        if r.l2_norm() <= rel_tol * rhs_norm {
            break;
        }
        let ap = apply(&p);
        let alpha = rz / p.dot(&ap).max(1e-300);
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        z = precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz.max(1e-300);
        rz = rz_new;
        let mut p_new = z.clone();
        p_new.axpy(beta, &p);
        p = p_new;
    }
    x
}

/// Spectral solve of `(1 - lap) x = r`.
fn helmholtz_inverse_unit(r: &ScalarField) -> ScalarField {
    let grid = r.grid().clone();
    let mut fh = grid.forward(r);
    fh.divide_by_helmholtz_weight(1.0);
    grid.inverse(&fh)
}

/// Exact spectral solve of the constant-coefficient linearized problem
/// `(-lap + n0_e + n0_i) phi1 = b - mean(b)`, the test oracle for small
/// doping perturbations.
pub fn linearized_oracle(b: &DopingProfile, m_i: f64) -> ScalarField {
    let grid = b.grid().clone();
    let mean_b = b.field().mean();
    let n0_e = m_i + mean_b;
    let n0_i = m_i;
    let rhs = b.field().map(|v| v - mean_b);
    let mut fh = grid.forward(&rhs);
    fh.divide_by_helmholtz_weight(n0_e + n0_i);
    grid.inverse(&fh)
}

/// Solve the steady-state problem for the given doping profile.
pub fn solve_equilibrium(
    doping: &DopingProfile,
    m_i: f64,
    bbar: [f64; 3],
    tol: f64,
) -> Result<Equilibrium> {
    if m_i <= 0.0 {
        return Err(EmxError::Validation {
            key: "m_i".into(),
            constraint: "ion mass must be > 0".into(),
        });
    }
    if tol <= 0.0 {
        return Err(EmxError::Validation {
            key: "tol".into(),
            constraint: "tolerance must be > 0".into(),
        });
    }
    let b = doping.field();
    let m_e = m_i + b.mean();
    let max_outer = 50;

    // Linearized solve as the initial guess.
    let mut phi = linearized_oracle(doping, m_i);
    let mut res_field = gauss_residual(&phi, b, m_e, m_i);
    let mut res = res_field.linf();

    let mut iterations = 0;
    while res > tol && iterations < max_outer {
        iterations += 1;
        let (n_e, n_i) = densities(&phi, m_e, m_i);
        let w = n_e.add(&n_i);
        // Newton step: (-lap + n_e + n_i) delta = residual
        let delta = pcg_helmholtz(&res_field, &w, 1e-12, 500);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let mut trial = phi.clone();
            trial.axpy(alpha, &delta);
            let m = trial.mean();
            let trial = trial.map(|v| v - m);
            let trial_res_field = gauss_residual(&trial, b, m_e, m_i);
            let trial_res = trial_res_field.linf();
            if trial_res < res {
                phi = trial;
                res_field = trial_res_field;
                res = trial_res;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // damped Picard fallback on the constant-coefficient problem
            let delta = {
                let grid = phi.grid().clone();
                let mut fh = grid.forward(&res_field);
                fh.divide_by_helmholtz_weight(m_e + m_i);
                grid.inverse(&fh)
            };
            phi.axpy(0.5, &delta);
            let m = phi.mean();
            phi = phi.map(|v| v - m);
            let new_res_field = gauss_residual(&phi, b, m_e, m_i);
            let new_res = new_res_field.linf();
            if new_res >= res {
                return Err(EmxError::NoConvergence {
                    iterations,
                    residual: res,
                });
            }
            res_field = new_res_field;
            res = new_res;
        }
    }

    let (nbar_e, nbar_i) = densities(&phi, m_e, m_i);
    let ebar = phi.gradient().scale(-1.0);
    let eq = Equilibrium {
        nbar_e,
        nbar_i,
        phibar: phi,
        ebar,
        bbar,
        doping: doping.clone(),
        residual: res,
    };
    let (r_e, r_i, r_g) = equilibrium_residual(&eq);
    let residual = r_e.max(r_i).max(r_g);
    if residual > tol {
        return Err(EmxError::NoConvergence {
            iterations,
            residual,
        });
    }
    debug_assert!(eq.nbar_e.min() > 0.0 && eq.nbar_i.min() > 0.0);
    Ok(Equilibrium { residual, ..eq })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(n: usize) -> Grid {
        Grid::new(1, n).unwrap()
    }

    #[test]
    fn rejects_nonpositive_doping() {
        let g = grid1(16);
        match DopingProfile::constant(&g, -0.1) {
            Err(EmxError::InvalidDoping { .. }) => {}
            other => panic!("expected InvalidDoping, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn constant_doping_gives_homogeneous_state() {
        let g = grid1(32);
        let beta = 0.7;
        let b = DopingProfile::constant(&g, beta).unwrap();
        let eq = solve_equilibrium(&b, 1.0, [0.0; 3], 1e-12).unwrap();
        assert!(eq.phibar.linf() <= 1e-13);
        assert!(eq.nbar_i.sub(&ScalarField::constant(&g, 1.0)).linf() <= 1e-13);
        assert!(eq.nbar_e.sub(&ScalarField::constant(&g, 1.0 + beta)).linf() <= 1e-13);
        assert!(eq.ebar.linf() <= 1e-13);
        let (r_e, r_i, r_g) = equilibrium_residual(&eq);
        assert!(r_e <= 1e-13 && r_i <= 1e-13 && r_g <= 1e-13);
    }

    #[test]
    fn small_cosine_doping_matches_linearized_solution() {
        let g = grid1(64);
        let eps = 1e-3;
        let beta = 0.5;
        let b = DopingProfile::cosine(&g, beta, eps).unwrap();
        let eq = solve_equilibrium(&b, 1.0, [0.0; 3], 1e-12).unwrap();
        let phi1 = linearized_oracle(&b, 1.0);
        assert!(eq.phibar.sub(&phi1).linf() <= 10.0 * eps * eps);
    }

    #[test]
    fn linearized_oracle_matches_brute_force_picard_at_tiny_eps() {
        // damped fixed-point iteration on the full nonlinear problem,
        // independent of the Newton path
        let g = grid1(64);
        let eps = 1e-5;
        let beta = 0.5;
        let b = DopingProfile::cosine(&g, beta, eps).unwrap();
        let m_i = 1.0;
        let m_e = m_i + b.field().mean();
        let mut phi = ScalarField::zeros(&g);
        for _ in 0..400 {
            let res = gauss_residual(&phi, b.field(), m_e, m_i);
            let grid = phi.grid().clone();
            let mut fh = grid.forward(&res);
            fh.divide_by_helmholtz_weight(m_e + m_i);
            let delta = grid.inverse(&fh);
            phi.axpy(0.5, &delta);
            let m = phi.mean();
            phi = phi.map(|v| v - m);
        }
        let phi1 = linearized_oracle(&b, m_i);
        assert!(phi.sub(&phi1).linf() <= 10.0 * eps * eps);
    }

    #[test]
    fn linearized_oracle_trivia() {
        let g = grid1(32);
        let b = DopingProfile::constant(&g, 1.0).unwrap();
        assert!(linearized_oracle(&b, 1.0).linf() <= 1e-15);
        // superposition over modes
        let b1 = DopingProfile::new(ScalarField::from_fn(&g, |x| {
            1.0 + 0.1 * (2.0 * PI * x[0]).cos()
        }))
        .unwrap();
        let b2 = DopingProfile::new(ScalarField::from_fn(&g, |x| {
            1.0 + 0.05 * (4.0 * PI * x[0]).sin()
        }))
        .unwrap();
        let b12 = DopingProfile::new(ScalarField::from_fn(&g, |x| {
            1.0 + 0.1 * (2.0 * PI * x[0]).cos() + 0.05 * (4.0 * PI * x[0]).sin()
        }))
        .unwrap();
        let sum = linearized_oracle(&b1, 1.0).add(&linearized_oracle(&b2, 1.0));
        // oracles share the same constant weight only when mean(b) matches;
        // all three profiles here have mean 1, so superposition is exact
        assert!(linearized_oracle(&b12, 1.0).sub(&sum).linf() <= 1e-13);
    }

    #[test]
    fn random_doping_solves_to_tight_residual() {
        let g = grid1(64);
        let b = DopingProfile::random(&g, 0.6, 0.5, 3, 42).unwrap();
        assert!(b.field().min() >= 0.1 - 1e-12);
        let eq = solve_equilibrium(&b, 1.0, [0.0; 3], 1e-10).unwrap();
        let (r_e, r_i, r_g) = equilibrium_residual(&eq);
        assert!(r_e <= 1e-10 && r_i <= 1e-10 && r_g <= 1e-10, "{r_e} {r_i} {r_g}");
        assert!(eq.nbar_e.min() > 0.0);
        assert!(eq.nbar_i.min() > 0.0);
    }

    #[test]
    fn residual_detects_corruption() {
        let g = grid1(64);
        let b = DopingProfile::cosine(&g, 0.5, 0.2).unwrap();
        let eq = solve_equilibrium(&b, 1.0, [0.0; 3], 1e-10).unwrap();
        let phi_bad = eq.phibar.scale(1.01);
        let (nbar_e, nbar_i) = densities(&phi_bad, 1.0 + b.field().mean(), 1.0);
        let bad = Equilibrium {
            ebar: phi_bad.gradient().scale(-1.0),
            phibar: phi_bad,
            nbar_e,
            nbar_i,
            ..eq
        };
        let (_, _, r_g) = equilibrium_residual(&bad);
        assert!(r_g > 1e-4, "gauss residual {r_g} should flag corruption");
    }

    #[test]
    fn masses_are_conserved() {
        let g = grid1(64);
        let b = DopingProfile::cosine(&g, 0.8, 0.4).unwrap();
        let m_i = 1.3;
        let eq = solve_equilibrium(&b, m_i, [0.0; 3], 1e-10).unwrap();
        let m_e = m_i + b.field().mean();
        assert!((eq.nbar_i.mean() - m_i).abs() / m_i <= 1e-12);
        assert!((eq.nbar_e.mean() - m_e).abs() / m_e <= 1e-12);
        // global neutrality
        let rho = eq.nbar_i.sub(&eq.nbar_e).add(b.field());
        assert!(rho.mean().abs() <= 1e-12);
    }

    #[test]
    fn refinement_shrinks_prolonged_residual() {
        // broad-spectrum doping so the coarse truncation error is visible
        let make_b = |g: &Grid| {
            ScalarField::from_fn(g, |x| {
                1.0 + 0.12 * (2.0 * PI * x[0]).cos()
                    + 0.1 * (2.0 * PI * 3.0 * x[0]).sin()
                    + 0.08 * (2.0 * PI * 5.0 * x[0]).cos()
                    + 0.06 * (2.0 * PI * 7.0 * x[0]).sin()
            })
        };
        let fine = grid1(128);
        let b_fine = make_b(&fine);
        let m_i = 1.0;
        let m_e = m_i + b_fine.mean();
        let prolonged_residual = |n: usize| -> f64 {
            let g = grid1(n);
            let b = DopingProfile::new(make_b(&g)).unwrap();
            let eq = solve_equilibrium(&b, m_i, [0.0; 3], 1e-12).unwrap();
            // prolong the coarse potential spectrally: evaluate its
            // trigonometric interpolant at the fine-grid points (d=1, so
            // the flat spectral index is the mode index)
            let gh = g.forward(&eq.phibar);
            let mut data = vec![0.0; fine.total_points()];
            for (i, v) in data.iter_mut().enumerate() {
                let x = fine.coords(i)[0];
                let mut acc = 0.0;
                for (m, c) in gh.data().iter().enumerate() {
                    let k = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
                    let arg = 2.0 * PI * k * x;
                    acc += c.re * arg.cos() - c.im * arg.sin();
                }
                *v = acc;
            }
            let phi_fine = ScalarField::from_vec(&fine, data);
            gauss_residual(&phi_fine, &b_fine, m_e, m_i).linf()
        };
        let r16 = prolonged_residual(16);
        let r32 = prolonged_residual(32);
        assert!(
            r16 >= 100.0 * r32.max(1e-15),
            "expected spectral decay: r16={r16:.3e}, r32={r32:.3e}"
        );
    }
}
