//! Pointwise 5x5 matrix algebra of the symmetrizable quasilinear form.
//!
//! State ordering is `(Q, u1, u2, u3, Theta)` throughout: log-pressure
//! perturbation, velocity, temperature perturbation. The module is
//! grid-free; all spatial derivative combinations enter as precomputed
//! scalars so everything here is unit-testable pointwise.

use serde::{Deserialize, Serialize};

use crate::error::{EmxError, Result};

/// Dense 5x5 real matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix5(pub [[f64; 5]; 5]);

impl Matrix5 {
    pub fn zeros() -> Matrix5 {
        Matrix5([[0.0; 5]; 5])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r][c]
    }

    pub fn transpose(&self) -> Matrix5 {
        let mut out = Matrix5::zeros();
        for r in 0..5 {
            for c in 0..5 {
                out.0[r][c] = self.0[c][r];
            }
        }
        out
    }

    pub fn mul(&self, other: &Matrix5) -> Matrix5 {
        let mut out = Matrix5::zeros();
        for r in 0..5 {
            for c in 0..5 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += self.0[r][k] * other.0[k][c];
                }
                out.0[r][c] = acc;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix5) -> Matrix5 {
        let mut out = *self;
        for r in 0..5 {
            for c in 0..5 {
                out.0[r][c] += other.0[r][c];
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix5) -> Matrix5 {
        let mut out = *self;
        for r in 0..5 {
            for c in 0..5 {
                out.0[r][c] -= other.0[r][c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix5 {
        let mut out = *self;
        for r in 0..5 {
            for c in 0..5 {
                out.0[r][c] *= s;
            }
        }
        out
    }

    /// Max absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `max |M - M^T|` entrywise.
    pub fn symmetry_defect(&self) -> f64 {
        self.sub(&self.transpose()).max_abs()
    }

    /// `max |M + M^T|` entrywise.
    pub fn antisymmetry_defect(&self) -> f64 {
        self.add(&self.transpose()).max_abs()
    }

    pub fn apply(&self, v: &[f64; 5]) -> [f64; 5] {
        std::array::from_fn(|r| (0..5).map(|c| self.0[r][c] * v[c]).sum())
    }

    pub fn quadratic_form(&self, v: &[f64; 5]) -> f64 {
        let mv = self.apply(v);
        (0..5).map(|i| v[i] * mv[i]).sum()
    }
}

fn require_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(EmxError::InvalidState(format!("{name} = {v} must be > 0")))
    }
}

/// Quasilinear flux matrix `A_j(u, theta)` for direction `j` (0-based):
/// blocks `[u_j, 2 e_j^T, 0; theta e_j, u_j I3, 0; 0, theta e_j^T, u_j]`.
pub fn flux_matrix(j: usize, u: [f64; 3], theta: f64) -> Result<Matrix5> {
    assert!(j < 3, "direction out of range");
    require_positive("theta", theta)?;
    let mut m = Matrix5::zeros();
    let uj = u[j];
    m.0[0][0] = uj;
    m.0[0][1 + j] = 2.0;
    for a in 0..3 {
        m.0[1 + a][1 + a] = uj;
    }
    m.0[1 + j][0] = theta;
    m.0[4][1 + j] = theta;
    m.0[4][4] = uj;
    Ok(m)
}

/// Friedrichs symmetrizer `A0(p, theta)`: symmetric positive definite,
/// blocks `[p, 0, -p/theta; 0, (p/theta) I3, 0; -p/theta, 0, 2p/theta^2]`.
pub fn symmetrizer(p: f64, theta: f64) -> Result<Matrix5> {
    require_positive("p", p)?;
    require_positive("theta", theta)?;
    let mut m = Matrix5::zeros();
    let pt = p / theta;
    m.0[0][0] = p;
    m.0[0][4] = -pt;
    m.0[4][0] = -pt;
    for a in 0..3 {
        m.0[1 + a][1 + a] = pt;
    }
    m.0[4][4] = 2.0 * p / (theta * theta);
    Ok(m)
}

/// Eigenvalues of the symmetrizer: `p/theta` (multiplicity 3, velocity
/// block) plus the two eigenvalues of the 2x2 `(Q, Theta)` corner block.
pub fn symmetrizer_eigenvalues(p: f64, theta: f64) -> Result<[f64; 3]> {
    require_positive("p", p)?;
    require_positive("theta", theta)?;
    let a = p;
    let b = -p / theta;
    let d = 2.0 * p / (theta * theta);
    let tr = a + d;
    let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
    Ok([(tr - disc) / 2.0, p / theta, (tr + disc) / 2.0])
}

pub fn symmetrizer_min_eigenvalue(p: f64, theta: f64) -> Result<f64> {
    let [lo, mid, _] = symmetrizer_eigenvalues(p, theta)?;
    Ok(lo.min(mid))
}

/// Symmetrized flux `A0(p,theta) * A_j(u,theta)`, symmetric for all
/// admissible states.
pub fn symmetrized_flux(j: usize, p: f64, u: [f64; 3], theta: f64) -> Result<Matrix5> {
    Ok(symmetrizer(p, theta)?.mul(&flux_matrix(j, u, theta)?))
}

/// Zeroth-order coupling matrix `L(x)` built from the equilibrium
/// log-pressure gradient: blocks
/// `[0, (grad qbar)^T, 0; 0, 0, grad qbar; 0, 0, 0]`.
pub fn source_matrix(grad_qbar: [f64; 3]) -> Matrix5 {
    let mut m = Matrix5::zeros();
    for a in 0..3 {
        m.0[0][1 + a] = grad_qbar[a];
        m.0[1 + a][4] = grad_qbar[a];
    }
    m
}

/// Stiff source vector `K(u, theta, F, G; Bbar, q)`:
/// `(|u|^2/(2 theta) - Theta/theta, q (F + u x (Bbar + G)) - u, |u|^2/2 - Theta)`
/// with `Theta = theta - 1`.
pub fn stiff_source(
    u: [f64; 3],
    theta: f64,
    f: [f64; 3],
    g: [f64; 3],
    bbar: [f64; 3],
    q: f64,
) -> Result<[f64; 5]> {
    require_positive("theta", theta)?;
    let cap_theta = theta - 1.0;
    let usq = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    let btot = [bbar[0] + g[0], bbar[1] + g[1], bbar[2] + g[2]];
    let uxb = [
        u[1] * btot[2] - u[2] * btot[1],
        u[2] * btot[0] - u[0] * btot[2],
        u[0] * btot[1] - u[1] * btot[0],
    ];
    let mut out = [0.0; 5];
    out[0] = usq / (2.0 * theta) - cap_theta / theta;
    for a in 0..3 {
        out[1 + a] = q * (f[a] + uxb[a]) - u[a];
    }
    out[4] = usq / 2.0 - cap_theta;
    Ok(out)
}

/// Pointwise scalars feeding the commutator matrix. The gradient and
/// divergence combinations are precomputed on the caller's grid so this
/// module stays grid-free.
#[derive(Clone, Copy, Debug)]
pub struct SpeciesScalars {
    pub p: f64,
    pub u: [f64; 3],
    pub theta: f64,
    /// Charge sign: -1 for electrons, +1 for ions.
    pub q: f64,
    pub grad_p: [f64; 3],
    pub grad_pbar: [f64; 3],
    /// `grad(ln pbar) = grad pbar / pbar`.
    pub grad_qbar: [f64; 3],
    pub div_pu: f64,
    pub div_pu_over_theta: f64,
    pub div_pu_over_theta2: f64,
}

impl SpeciesScalars {
    /// Equilibrium point: `p = pbar`, `u = 0`, `theta = 1`, matching
    /// gradients, vanishing divergences.
    pub fn at_equilibrium(pbar: f64, grad_pbar: [f64; 3], q: f64) -> SpeciesScalars {
        SpeciesScalars {
            p: pbar,
            u: [0.0; 3],
            theta: 1.0,
            q,
            grad_p: grad_pbar,
            grad_pbar,
            grad_qbar: std::array::from_fn(|a| grad_pbar[a] / pbar),
            div_pu: 0.0,
            div_pu_over_theta: 0.0,
            div_pu_over_theta2: 0.0,
        }
    }
}

/// Commutator matrix `B = sum_j d_j(A0 A_j) - 2 A0 L`, assembled entrywise
/// from precomputed scalars. Antisymmetric at the equilibrium point
/// `(p, u, theta) = (pbar, 0, 1)` with matching gradients.
pub fn commutator_matrix(sc: &SpeciesScalars) -> Result<Matrix5> {
    require_positive("p", sc.p)?;
    require_positive("theta", sc.theta)?;
    let mut m = Matrix5::zeros();
    let p_over_theta = sc.p / sc.theta;
    m.0[0][0] = sc.div_pu;
    for a in 0..3 {
        // row 1: (grad p)^T - 2 (p/pbar)(grad pbar)^T  [= grad p - 2 p grad qbar]
        m.0[0][1 + a] = sc.grad_p[a] - 2.0 * sc.p * sc.grad_qbar[a];
        m.0[1 + a][0] = sc.grad_p[a];
        m.0[1 + a][1 + a] = sc.div_pu_over_theta;
        m.0[1 + a][4] = -2.0 * p_over_theta * sc.grad_qbar[a];
        m.0[4][1 + a] = 2.0 * p_over_theta * sc.grad_qbar[a];
    }
    m.0[0][4] = -sc.div_pu_over_theta;
    m.0[4][0] = -sc.div_pu_over_theta;
    m.0[4][4] = 2.0 * sc.div_pu_over_theta2;
    Ok(m)
}

/// Batch verification report for the symmetrizer algebra claims.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlgebraReport {
    pub samples: usize,
    pub seed: u64,
    /// Max over samples and directions of the symmetry defect of `A0 A_j`.
    pub max_symmetrized_flux_defect: f64,
    /// Min over samples of the smallest eigenvalue of `A0`.
    pub min_symmetrizer_eigenvalue: f64,
    /// Max antisymmetry defect of the commutator at equilibrium-consistent
    /// inputs.
    pub max_equilibrium_antisymmetry_defect: f64,
    pub symmetry_pass: bool,
    pub definiteness_pass: bool,
    pub antisymmetry_pass: bool,
    pub pass: bool,
}

pub const SYMMETRY_TOL: f64 = 1e-12;
pub const ANTISYMMETRY_TOL: f64 = 1e-10;

/// Draw `samples` random states in `[1/2,2] x [-1,1]^3 x [1/2,2]` and record
/// the worst-case defects. Deterministic given the seed.
pub fn check_algebra(samples: usize, seed: u64) -> Result<AlgebraReport> {
    use rand::{Rng, SeedableRng};
    assert!(samples >= 1, "samples must be >= 1");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_defect = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut max_anti = 0.0f64;
    for _ in 0..samples {
        let p: f64 = rng.gen_range(0.5..2.0);
        let theta: f64 = rng.gen_range(0.5..2.0);
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        for j in 0..3 {
            max_defect = max_defect.max(symmetrized_flux(j, p, u, theta)?.symmetry_defect());
        }
        min_eig = min_eig.min(symmetrizer_min_eigenvalue(p, theta)?);
        // equilibrium-consistent commutator input with a random gradient
        let grad: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let sc = SpeciesScalars::at_equilibrium(p, grad, 1.0);
        max_anti = max_anti.max(commutator_matrix(&sc)?.antisymmetry_defect());
    }
    let symmetry_pass = max_defect <= SYMMETRY_TOL;
    let definiteness_pass = min_eig > 0.0;
    let antisymmetry_pass = max_anti <= ANTISYMMETRY_TOL;
    Ok(AlgebraReport {
        samples,
        seed,
        max_symmetrized_flux_defect: max_defect,
        min_symmetrizer_eigenvalue: min_eig,
        max_equilibrium_antisymmetry_defect: max_anti,
        symmetry_pass,
        definiteness_pass,
        antisymmetry_pass,
        pass: symmetry_pass && definiteness_pass && antisymmetry_pass,
    })
}
