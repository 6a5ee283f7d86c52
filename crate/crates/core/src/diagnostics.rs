//! Perturbation variables, symmetrizer-weighted energies, mixed space-time
//! norms, electrostatic potential recovery, and decay-rate fitting.

use crate::algebra;
use crate::dynamics::{self, PlasmaState};
use crate::equilibrium::Equilibrium;
use crate::error::{EmxError, Result};
use crate::grid::{Grid, ScalarField, VectorField};

/// Perturbation variables around an equilibrium: per species the
/// log-pressure deviation `Q`, velocity `u` and temperature deviation
/// `Theta`, plus field deviations `F = E - Ebar`, `G = B - Bbar` and the
/// derived density deviations `N = n - nbar`.
///
/// Species index 0 is electrons, 1 is ions.
#[derive(Clone, Debug)]
pub struct PerturbationState {
    q: [ScalarField; 2],
    u: [VectorField; 2],
    theta: [ScalarField; 2],
    f: VectorField,
    g: VectorField,
    n: [ScalarField; 2],
    /// Max pointwise disagreement between `n - nbar` and the closed-form
    /// density relation `exp(q)/theta - exp(qbar)`.
    pub representation_discrepancy: f64,
}

impl PerturbationState {
    pub fn grid(&self) -> &Grid {
        self.q[0].grid()
    }

    pub fn species(&self, idx: usize) -> (&ScalarField, &VectorField, &ScalarField) {
        (&self.q[idx], &self.u[idx], &self.theta[idx])
    }

    pub fn n_nu(&self, idx: usize) -> &ScalarField {
        &self.n[idx]
    }

    pub fn f(&self) -> &VectorField {
        &self.f
    }

    pub fn g(&self) -> &VectorField {
        &self.g
    }

    pub fn set_species(&mut self, idx: usize, q: ScalarField, u: VectorField, theta: ScalarField) {
        self.q[idx] = q;
        self.u[idx] = u;
        self.theta[idx] = theta;
    }

    pub fn set_fields(&mut self, f: VectorField, g: VectorField) {
        self.f = f;
        self.g = g;
    }

    pub fn zeros(eq: &Equilibrium) -> PerturbationState {
        let grid = eq.grid();
        PerturbationState {
            q: std::array::from_fn(|_| ScalarField::zeros(grid)),
            u: std::array::from_fn(|_| VectorField::zeros(grid)),
            theta: std::array::from_fn(|_| ScalarField::zeros(grid)),
            f: VectorField::zeros(grid),
            g: VectorField::zeros(grid),
            n: std::array::from_fn(|_| ScalarField::zeros(grid)),
            representation_discrepancy: 0.0,
        }
    }

    /// Reconstruct the primitive state this perturbation represents.
    pub fn to_primitive(&self, eq: &Equilibrium, t: f64) -> PlasmaState {
        let grid = eq.grid();
        let theta_e = self.theta[0].map(|v| 1.0 + v);
        let theta_i = self.theta[1].map(|v| 1.0 + v);
        let p_e = self.q[0].zip(&eq.log_pressure(true), |q, qb| (q + qb).exp());
        let p_i = self.q[1].zip(&eq.log_pressure(false), |q, qb| (q + qb).exp());
        PlasmaState {
            t,
            n_e: p_e.zip(&theta_e, |p, th| p / th),
            u_e: self.u[0].clone(),
            theta_e,
            n_i: p_i.zip(&theta_i, |p, th| p / th),
            u_i: self.u[1].clone(),
            theta_i,
            e: eq.ebar.add(&self.f),
            b: VectorField::constant(grid, eq.bbar).add(&self.g),
        }
    }
}

/// Change of variables from primitive state to perturbation variables.
pub fn perturbation_of(s: &PlasmaState, eq: &Equilibrium) -> Result<PerturbationState> {
    let mut discrepancy = 0.0f64;
    let mut q = Vec::with_capacity(2);
    let mut theta = Vec::with_capacity(2);
    let mut n = Vec::with_capacity(2);
    for (nf, thf, nbar) in [
        (&s.n_e, &s.theta_e, &eq.nbar_e),
        (&s.n_i, &s.theta_i, &eq.nbar_i),
    ] {
        let p = nf.mul(thf);
        let (idx, val) = p.argmin();
        if val <= 0.0 {
            return Err(EmxError::PositivityViolation {
                field: "p",
                index: idx,
                value: val,
            });
        }
        let qbar = nbar.map(f64::ln);
        let qv = p.map(f64::ln).sub(&qbar);
        let n_direct = nf.sub(nbar);
        // density relation: N = exp(q)/theta - exp(qbar) (unit equilibrium
        // temperature), cross-checked against the direct difference
        for i in 0..n_direct.data().len() {
            let alt = (qv.data()[i] + qbar.data()[i]).exp() / thf.data()[i]
                - qbar.data()[i].exp();
            discrepancy = discrepancy.max((alt - n_direct.data()[i]).abs());
        }
        q.push(qv);
        theta.push(thf.map(|v| v - 1.0));
        n.push(n_direct);
    }
    let grid = eq.grid();
    let [q0, q1] = <[ScalarField; 2]>::try_from(q).unwrap();
    let [t0, t1] = <[ScalarField; 2]>::try_from(theta).unwrap();
    let [n0, n1] = <[ScalarField; 2]>::try_from(n).unwrap();
    Ok(PerturbationState {
        q: [q0, q1],
        u: [s.u_e.clone(), s.u_i.clone()],
        theta: [t0, t1],
        f: s.e.sub(&eq.ebar),
        g: s.b.sub(&VectorField::constant(grid, eq.bbar)),
        n: [n0, n1],
        representation_discrepancy: discrepancy,
    })
}

/// All multi-indices over the active axes with `|alpha| <= s_max`.
fn multi_indices(dims: usize, s_max: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let lim = |a: usize| if a < dims { s_max } else { 0 };
    for a0 in 0..=lim(0) {
        for a1 in 0..=lim(1) {
            for a2 in 0..=lim(2) {
                if a0 + a1 + a2 <= s_max {
                    out.push([a0, a1, a2]);
                }
            }
        }
    }
    out
}

fn derivative_multi(f: &ScalarField, alpha: [usize; 3]) -> ScalarField {
    let mut out = f.clone();
    for (axis, &order) in alpha.iter().enumerate() {
        for _ in 0..order {
            out = out.derivative(axis);
        }
    }
    out
}

/// Symmetrizer-weighted quadratic energy
/// `sum_{|alpha| <= s_d} [ sum_nu <A0(p,theta) d^a V, d^a V> + ||d^a F||^2 + ||d^a G||^2 ]`
/// with the symmetrizer evaluated at the pointwise state.
pub fn quadratic_energy(z: &PerturbationState, s: &PlasmaState, s_d: usize) -> Result<f64> {
    let grid = z.grid().clone();
    let npts = grid.total_points();
    let mut total = 0.0;
    for alpha in multi_indices(grid.dims(), s_d) {
        for (species, (nf, thf)) in [(&s.n_e, &s.theta_e), (&s.n_i, &s.theta_i)]
            .into_iter()
            .enumerate()
        {
            let (qv, u, th) = z.species(species);
            let dq = derivative_multi(qv, alpha);
            let du: [ScalarField; 3] =
                std::array::from_fn(|a| derivative_multi(u.component(a), alpha));
            let dth = derivative_multi(th, alpha);
            let mut acc = 0.0;
            for i in 0..npts {
                let p = nf.data()[i] * thf.data()[i];
                let theta = thf.data()[i];
                if p <= 0.0 || theta <= 0.0 {
                    return Err(EmxError::PositivityViolation {
                        field: "p",
                        index: i,
                        value: p.min(theta),
                    });
                }
                let v = [
                    dq.data()[i],
                    du[0].data()[i],
                    du[1].data()[i],
                    du[2].data()[i],
                    dth.data()[i],
                ];
                // quadratic form of the symmetrizer, expanded inline
                let pt = p / theta;
                acc += p * v[0] * v[0] + pt * (v[1] * v[1] + v[2] * v[2] + v[3] * v[3])
                    + 2.0 * p / (theta * theta) * v[4] * v[4]
                    - 2.0 * pt * v[0] * v[4];
            }
            total += acc / npts as f64;
        }
        for field in [z.f(), z.g()] {
            for a in 0..3 {
                let d = derivative_multi(field.component(a), alpha);
                total += d.dot(&d);
            }
        }
    }
    Ok(total)
}

/// Mixed space-time norm with time-derivative orders `k <= k_max <= 1`:
/// `k = 0` terms are plain `H^{s_tot}` norms of the theorem variables
/// `(N, u, Theta, F, G)`; `k = 1` terms substitute the time derivative by
/// the primitive right-hand side (pushed forward through the change of
/// variables) and take `H^{s_tot - 1}` norms.
pub fn mixed_norm(
    s: &PlasmaState,
    eq: &Equilibrium,
    s_tot: usize,
    k_max: usize,
) -> Result<f64> {
    assert!(k_max <= 1, "only k_max <= 1 is supported");
    let z = perturbation_of(s, eq)?;
    let mut acc = 0.0;
    let sq = |v: f64| v * v;
    for species in 0..2 {
        let (_, u, th) = z.species(species);
        acc += sq(z.n_nu(species).sobolev_norm(s_tot));
        acc += sq(u.sobolev_norm(s_tot));
        acc += sq(th.sobolev_norm(s_tot));
    }
    acc += sq(z.f().sobolev_norm(s_tot));
    acc += sq(z.g().sobolev_norm(s_tot));
    if k_max >= 1 {
        let s1 = s_tot.saturating_sub(1);
        let tang = dynamics::rhs_primitive(s, true)?;
        // dN = dn, dTheta = dtheta, dF = dE, dG = dB
        acc += sq(tang.n_e.sobolev_norm(s1));
        acc += sq(tang.u_e.sobolev_norm(s1));
        acc += sq(tang.theta_e.sobolev_norm(s1));
        acc += sq(tang.n_i.sobolev_norm(s1));
        acc += sq(tang.u_i.sobolev_norm(s1));
        acc += sq(tang.theta_i.sobolev_norm(s1));
        acc += sq(tang.e.sobolev_norm(s1));
        acc += sq(tang.b.sobolev_norm(s1));
    }
    Ok(acc.sqrt())
}

/// Recover the electrostatic potential of the field perturbation:
/// mean-zero `psi` with `grad(psi)` equal to the irrotational part of
/// `-F`. Returns the potential and the norm of the rotational remainder.
pub fn recover_potential(f: &VectorField) -> Result<(ScalarField, f64)> {
    let div_f = f.divergence();
    let psi = div_f.scale(-1.0).poisson_solve_mean_zero()?;
    let remainder = f.add(&psi.gradient());
    Ok((psi, remainder.l2_norm()))
}

/// Least-squares decay rate of `ln(value)` against `t` over the window,
/// with the coefficient of determination.
pub fn decay_fit(series: &[(f64, f64)], window: (f64, f64)) -> Result<(f64, f64)> {
    let mut pts = Vec::new();
    for &(t, v) in series {
        if t >= window.0 && t <= window.1 {
            if v <= 0.0 {
                return Err(EmxError::NonPositiveValue { t, value: v });
            }
            pts.push((t, v.ln()));
        }
    }
    if pts.len() < 10 {
        return Err(EmxError::InsufficientData(format!(
            "need at least 10 samples in the window, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    let mut syy = 0.0;
    for &(t, y) in &pts {
        stt += (t - mean_t) * (t - mean_t);
        sty += (t - mean_t) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    if stt == 0.0 {
        return Err(EmxError::InsufficientData(
            "window collapses to a single time".into(),
        ));
    }
    let rate = sty / stt;
    let r2 = if syy == 0.0 { 1.0 } else { (sty * sty) / (stt * syy) };
    Ok((rate, r2))
}

/// Min/max eigenvalue bounds of the symmetrizer over a pointwise state,
/// used for the norm-equivalence constants.
pub fn symmetrizer_eigenvalue_bounds(s: &PlasmaState) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (nf, thf) in [(&s.n_e, &s.theta_e), (&s.n_i, &s.theta_i)] {
        for i in 0..nf.data().len() {
            let p = nf.data()[i] * thf.data()[i];
            let theta = thf.data()[i];
            let eigs = algebra::symmetrizer_eigenvalues(p, theta)?;
            lo = lo.min(eigs[0]).min(eigs[1]);
            hi = hi.max(eigs[2]).max(eigs[1]);
        }
    }
    Ok((lo, hi))
}
