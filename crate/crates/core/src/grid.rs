//! Periodic spatial discretization on the unit torus.
//!
//! A [`Grid`] is a tensor grid with `d` active axes (1, 2 or 3) and `N`
//! points per active axis (`N` a power of two, at least 8). Vector fields
//! always carry three components; inactive axes simply have zero
//! wavenumber, so the full Lorentz/Maxwell structure survives in reduced
//! dimension ("1.5D/2.5D").
//!
//! Conventions: fields live on `x_a = j/N`, Fourier coefficients are
//! `f = sum_k fhat_k exp(2*pi*i k.x)` with integer wavevectors `k`, the
//! derivative multiplier is `2*pi*i*k` with the Nyquist mode zeroed, and
//! the discrete `H^s` norm weight is `(1 + 4*pi^2 |k|^2)^s` so that `s=1`
//! matches `||f||^2 + ||grad f||^2` exactly.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{EmxError, Result};

struct GridInner {
    dims: usize,
    n: usize,
    shape: [usize; 3],
    strides: [usize; 3],
    /// Per-axis integer wavenumber for each mode index (inactive axes: [0]).
    wavenumbers: [Vec<i64>; 3],
    fft_fwd: Arc<dyn Fft<f64>>,
    fft_inv: Arc<dyn Fft<f64>>,
}

/// Shared handle to a periodic grid. Cloning is cheap.
#[derive(Clone)]
pub struct Grid(Arc<GridInner>);

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.0.dims == other.0.dims && self.0.n == other.0.n
    }
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Grid(d={}, n={})", self.0.dims, self.0.n)
    }
}

impl Grid {
    pub fn new(dims: usize, n_per_axis: usize) -> Result<Grid> {
        if !(1..=3).contains(&dims) {
            return Err(EmxError::Validation {
                key: "d".into(),
                constraint: "dimension must be 1, 2 or 3".into(),
            });
        }
        if n_per_axis < 8 || !n_per_axis.is_power_of_two() {
            return Err(EmxError::Validation {
                key: "n_per_axis".into(),
                constraint: "must be a power of two >= 8".into(),
            });
        }
        let mut shape = [1usize; 3];
        for a in 0..dims {
            shape[a] = n_per_axis;
        }
        let strides = [shape[1] * shape[2], shape[2], 1];
        let wavenumbers = std::array::from_fn(|a| {
            let na = shape[a];
            (0..na)
                .map(|m| {
                    if m <= na / 2 {
                        m as i64
                    } else {
                        m as i64 - na as i64
                    }
                })
                .collect()
        });
        let mut planner = FftPlanner::new();
        Ok(Grid(Arc::new(GridInner {
            dims,
            n: n_per_axis,
            shape,
            strides,
            wavenumbers,
            fft_fwd: planner.plan_fft_forward(n_per_axis),
            fft_inv: planner.plan_fft_inverse(n_per_axis),
        })))
    }

    pub fn dims(&self) -> usize {
        self.0.dims
    }

    pub fn n_per_axis(&self) -> usize {
        self.0.n
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape
    }

    pub fn total_points(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_active(&self, axis: usize) -> bool {
        axis < self.0.dims
    }

    /// Coordinates of the grid point at a flat index (C order, axis 2 fastest).
    pub fn coords(&self, flat: usize) -> [f64; 3] {
        let i0 = flat / self.0.strides[0];
        let i1 = (flat / self.0.strides[1]) % self.0.shape[1];
        let i2 = flat % self.0.shape[2];
        let n = self.0.n as f64;
        [i0 as f64 / n, i1 as f64 / n, i2 as f64 / n]
    }

    /// Integer wavevector of the spectral mode at a flat index.
    fn wavevector(&self, flat: usize) -> [i64; 3] {
        let i0 = flat / self.0.strides[0];
        let i1 = (flat / self.0.strides[1]) % self.0.shape[1];
        let i2 = flat % self.0.shape[2];
        [
            self.0.wavenumbers[0][i0],
            self.0.wavenumbers[1][i1],
            self.0.wavenumbers[2][i2],
        ]
    }

    /// Wavevector with the Nyquist mode mapped to zero, matching the
    /// derivative multiplier.
    fn wavevector_deriv(&self, flat: usize) -> [f64; 3] {
        let k = self.wavevector(flat);
        let nyq = (self.0.n / 2) as i64;
        std::array::from_fn(|a| {
            if self.is_active(a) && k[a].abs() == nyq {
                0.0
            } else {
                k[a] as f64
            }
        })
    }

    /// 2/3-rule mask: true where the mode is kept.
    fn dealias_keep(&self, flat: usize) -> bool {
        let k = self.wavevector(flat);
        let n = self.0.n as i64;
        (0..3).all(|a| 3 * k[a].abs() <= n)
    }

    fn fft_axis(&self, data: &mut [Complex64], axis: usize, inverse: bool) {
        let na = self.0.shape[axis];
        if na == 1 {
            return;
        }
        let fft = if inverse {
            &self.0.fft_inv
        } else {
            &self.0.fft_fwd
        };
        let stride = self.0.strides[axis];
        let (ob, oc) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut line = vec![Complex64::new(0.0, 0.0); na];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for ib in 0..self.0.shape[ob] {
            for ic in 0..self.0.shape[oc] {
                let base = ib * self.0.strides[ob] + ic * self.0.strides[oc];
                for m in 0..na {
                    line[m] = data[base + m * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for m in 0..na {
                    data[base + m * stride] = line[m];
                }
            }
        }
    }

    /// Forward transform with `1/N^d` normalization, so coefficients are the
    /// Fourier coefficients of the trigonometric interpolant.
    pub fn forward(&self, f: &ScalarField) -> SpectralField {
        debug_assert_eq!(&f.grid, self);
        let mut data: Vec<Complex64> = f.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for a in 0..3 {
            self.fft_axis(&mut data, a, false);
        }
        let scale = 1.0 / self.total_points() as f64;
        for c in data.iter_mut() {
            *c *= scale;
        }
        SpectralField {
            grid: self.clone(),
            data,
        }
    }

    pub fn inverse(&self, fh: &SpectralField) -> ScalarField {
        debug_assert_eq!(&fh.grid, self);
        let mut data = fh.data.clone();
        for a in 0..3 {
            self.fft_axis(&mut data, a, true);
        }
        ScalarField {
            grid: self.clone(),
            data: data.iter().map(|c| c.re).collect(),
        }
    }
}

/// Real scalar field sampled on a [`Grid`].
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Grid,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> ScalarField {
        ScalarField {
            grid: grid.clone(),
            data: vec![0.0; grid.total_points()],
        }
    }

    pub fn constant(grid: &Grid, c: f64) -> ScalarField {
        ScalarField {
            grid: grid.clone(),
            data: vec![c; grid.total_points()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> f64) -> ScalarField {
        let data = (0..grid.total_points()).map(|i| f(grid.coords(i))).collect();
        ScalarField {
            grid: grid.clone(),
            data,
        }
    }

    pub fn from_vec(grid: &Grid, data: Vec<f64>) -> ScalarField {
        assert_eq!(data.len(), grid.total_points());
        ScalarField {
            grid: grid.clone(),
            data,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Index and value of the entry with smallest value.
    pub fn argmin(&self) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, &v) in self.data.iter().enumerate() {
            if v < best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        debug_assert_eq!(self.grid, other.grid);
        ScalarField {
            grid: self.grid.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> ScalarField {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> ScalarField {
        self.map(|v| c * v)
    }

    pub fn axpy(&mut self, c: f64, other: &ScalarField) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    /// L2 inner product on the unit torus (volume-weighted mean of products).
    pub fn dot(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Spectral derivative along `axis` (0-based). Inactive axes return a
    /// zero field by contract.
    pub fn derivative(&self, axis: usize) -> ScalarField {
        if !self.grid.is_active(axis) {
            return ScalarField::zeros(&self.grid);
        }
        let mut fh = self.grid.forward(self);
        fh.differentiate(axis);
        self.grid.inverse(&fh)
    }

    pub fn gradient(&self) -> VectorField {
        VectorField {
            components: std::array::from_fn(|a| self.derivative(a)),
        }
    }

    pub fn laplacian(&self) -> ScalarField {
        let mut fh = self.grid.forward(self);
        for (i, c) in fh.data.iter_mut().enumerate() {
            let k = fh.grid.wavevector_deriv(i);
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            *c *= -4.0 * PI * PI * k2;
        }
        self.grid.inverse(&fh)
    }

    /// Solve `lap(psi) = rhs` for the unique mean-zero `psi`. The right-hand
    /// side must be (numerically) mean-free; the tolerance is relative to
    /// `||rhs||_inf` with an absolute floor of 1e-14.
    pub fn poisson_solve_mean_zero(&self) -> Result<ScalarField> {
        let tol = (1e-10 * self.linf()).max(1e-14);
        let mean = self.mean();
        if mean.abs() > tol {
            return Err(EmxError::NonZeroMean { mean, tol });
        }
        let mut fh = self.grid.forward(self);
        for (i, c) in fh.data.iter_mut().enumerate() {
            let k = fh.grid.wavevector_deriv(i);
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            if k2 == 0.0 {
                *c = Complex64::new(0.0, 0.0);
            } else {
                *c /= -4.0 * PI * PI * k2;
            }
        }
        Ok(self.grid.inverse(&fh))
    }

    /// Discrete Sobolev norm `sqrt(sum_k (1 + 4 pi^2 |k|^2)^s |fhat_k|^2)`.
    pub fn sobolev_norm(&self, s: usize) -> f64 {
        let fh = self.grid.forward(self);
        let mut acc = 0.0;
        for (i, c) in fh.data.iter().enumerate() {
            let k = fh.grid.wavevector_deriv(i);
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            let w = (1.0 + 4.0 * PI * PI * k2).powi(s as i32);
            acc += w * c.norm_sqr();
        }
        acc.sqrt()
    }

    /// Zero all spectral coefficients above the 2/3 cutoff.
    pub fn dealias(&self) -> ScalarField {
        let mut fh = self.grid.forward(self);
        fh.dealias();
        self.grid.inverse(&fh)
    }
}

/// Spectral-space view of a scalar field.
pub struct SpectralField {
    grid: Grid,
    data: Vec<Complex64>,
}

impl SpectralField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn differentiate(&mut self, axis: usize) {
        if !self.grid.is_active(axis) {
            for c in self.data.iter_mut() {
                *c = Complex64::new(0.0, 0.0);
            }
            return;
        }
        for (i, c) in self.data.iter_mut().enumerate() {
            let k = self.grid.wavevector_deriv(i);
            *c *= Complex64::new(0.0, 2.0 * PI * k[axis]);
        }
    }

    pub fn dealias(&mut self) {
        for (i, c) in self.data.iter_mut().enumerate() {
            if !self.grid.dealias_keep(i) {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Divide each coefficient by `c + 4 pi^2 |k|^2`: the exact spectral
    /// inverse of the constant-coefficient operator `(c - lap)`.
    pub fn divide_by_helmholtz_weight(&mut self, c: f64) {
        for (i, v) in self.data.iter_mut().enumerate() {
            let k = self.grid.wavevector_deriv(i);
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            *v /= c + 4.0 * PI * PI * k2;
        }
    }
}

/// Real vector field; always three components regardless of the grid
/// dimension.
#[derive(Clone, Debug)]
pub struct VectorField {
    components: [ScalarField; 3],
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> VectorField {
        VectorField {
            components: std::array::from_fn(|_| ScalarField::zeros(grid)),
        }
    }

    pub fn constant(grid: &Grid, v: [f64; 3]) -> VectorField {
        VectorField {
            components: std::array::from_fn(|a| ScalarField::constant(grid, v[a])),
        }
    }

    pub fn from_components(components: [ScalarField; 3]) -> VectorField {
        debug_assert_eq!(components[0].grid, components[1].grid);
        debug_assert_eq!(components[0].grid, components[2].grid);
        VectorField { components }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> [f64; 3]) -> VectorField {
        let mut comps: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(grid.total_points()));
        for i in 0..grid.total_points() {
            let v = f(grid.coords(i));
            for a in 0..3 {
                comps[a].push(v[a]);
            }
        }
        let [c0, c1, c2] = comps;
        VectorField {
            components: [
                ScalarField::from_vec(grid, c0),
                ScalarField::from_vec(grid, c1),
                ScalarField::from_vec(grid, c2),
            ],
        }
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    pub fn component(&self, a: usize) -> &ScalarField {
        &self.components[a]
    }

    pub fn component_mut(&mut self, a: usize) -> &mut ScalarField {
        &mut self.components[a]
    }

    pub fn is_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }

    pub fn add(&self, other: &VectorField) -> VectorField {
        VectorField {
            components: std::array::from_fn(|a| self.components[a].add(&other.components[a])),
        }
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        VectorField {
            components: std::array::from_fn(|a| self.components[a].sub(&other.components[a])),
        }
    }

    pub fn scale(&self, c: f64) -> VectorField {
        VectorField {
            components: std::array::from_fn(|a| self.components[a].scale(c)),
        }
    }

    pub fn axpy(&mut self, c: f64, other: &VectorField) {
        for a in 0..3 {
            self.components[a].axpy(c, &other.components[a]);
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in 0..3 {
            self.components[a].scale_in_place(c);
        }
    }

    /// Pointwise cross product.
    pub fn cross(&self, other: &VectorField) -> VectorField {
        let [ax, ay, az] = &self.components;
        let [bx, by, bz] = &other.components;
        VectorField {
            components: [
                ay.mul(bz).sub(&az.mul(by)),
                az.mul(bx).sub(&ax.mul(bz)),
                ax.mul(by).sub(&ay.mul(bx)),
            ],
        }
    }

    /// Pointwise squared magnitude.
    pub fn norm_sq_field(&self) -> ScalarField {
        let [x, y, z] = &self.components;
        x.mul(x).add(&y.mul(y)).add(&z.mul(z))
    }

    pub fn divergence(&self) -> ScalarField {
        let mut out = self.components[0].derivative(0);
        out.axpy(1.0, &self.components[1].derivative(1));
        out.axpy(1.0, &self.components[2].derivative(2));
        out
    }

    pub fn curl(&self) -> VectorField {
        let [x, y, z] = &self.components;
        VectorField {
            components: [
                z.derivative(1).sub(&y.derivative(2)),
                x.derivative(2).sub(&z.derivative(0)),
                y.derivative(0).sub(&x.derivative(1)),
            ],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.dot(c))
            .sum::<f64>()
            .sqrt()
    }

    pub fn linf(&self) -> f64 {
        self.components.iter().fold(0.0f64, |m, c| m.max(c.linf()))
    }

    pub fn sobolev_norm(&self, s: usize) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let n = c.sobolev_norm(s);
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn dealias(&self) -> VectorField {
        VectorField {
            components: std::array::from_fn(|a| self.components[a].dealias()),
        }
    }

    /// Helmholtz-Leray projection onto the divergence-free part:
    /// `v - grad(invlap(div v))`, done mode by mode in spectral space.
    pub fn leray_project(&self) -> VectorField {
        let grid = self.grid().clone();
        let mut hats: Vec<SpectralField> = self
            .components
            .iter()
            .map(|c| grid.forward(c))
            .collect();
        for i in 0..grid.total_points() {
            let k = grid.wavevector_deriv(i);
            let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            if k2 == 0.0 {
                continue;
            }
            let kdotv = k[0] * hats[0].data[i] + k[1] * hats[1].data[i] + k[2] * hats[2].data[i];
            for a in 0..3 {
                hats[a].data[i] -= kdotv * k[a] / k2;
            }
        }
        VectorField {
            components: std::array::from_fn(|a| grid.inverse(&hats[a])),
        }
    }
}

/// Sum of a fixed set of random cosine modes with `0 < |k_a| <= kmax` on the
/// active axes, scaled so the sup norm equals `amplitude`. Deterministic
/// given the RNG state; mean-free by construction.
pub fn random_band_limited(
    grid: &Grid,
    kmax: usize,
    amplitude: f64,
    rng: &mut impl rand::Rng,
) -> ScalarField {
    let kmax = kmax as i64;
    let mut f = ScalarField::zeros(grid);
    let mut modes: Vec<[i64; 3]> = Vec::new();
    let range = |active: bool| if active { (-kmax, kmax) } else { (0, 0) };
    let (l0, h0) = range(grid.is_active(0));
    let (l1, h1) = range(grid.is_active(1));
    let (l2, h2) = range(grid.is_active(2));
    for k0 in l0..=h0 {
        for k1 in l1..=h1 {
            for k2 in l2..=h2 {
                let k = [k0, k1, k2];
                if k == [0, 0, 0] {
                    continue;
                }
                // one representative per +-k pair
                if k > [0, 0, 0] {
                    modes.push(k);
                }
            }
        }
    }
    for k in modes {
        let amp: f64 = rng.gen_range(-1.0..1.0);
        let phase: f64 = rng.gen_range(0.0..(2.0 * PI));
        for (i, v) in f.data.iter_mut().enumerate() {
            let x = grid.coords(i);
            let arg = 2.0 * PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1] + k[2] as f64 * x[2]);
            *v += amp * (arg + phase).cos();
        }
    }
    let sup = f.linf();
    if sup > 0.0 {
        f.scale_in_place(amplitude / sup);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    const TAU: f64 = 2.0 * PI;

    fn grid1(n: usize) -> Grid {
        Grid::new(1, n).unwrap()
    }

    #[test]
    fn rejects_bad_grid_parameters() {
        assert!(Grid::new(0, 32).is_err());
        assert!(Grid::new(4, 32).is_err());
        assert!(Grid::new(1, 24).is_err());
        assert!(Grid::new(1, 4).is_err());
    }

    #[test]
    fn derivative_single_mode() {
        let g = grid1(32);
        let f = ScalarField::from_fn(&g, |x| (TAU * x[0]).sin());
        let df = f.derivative(0);
        let exact = ScalarField::from_fn(&g, |x| TAU * (TAU * x[0]).cos());
        assert!(df.sub(&exact).linf() <= 1e-12);
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let g = grid1(16);
        let f = ScalarField::constant(&g, 3.5);
        assert!(f.derivative(0).linf() <= 1e-14);
    }

    #[test]
    fn derivative_inactive_axis_is_zero() {
        let g = grid1(16);
        let f = ScalarField::from_fn(&g, |x| (TAU * x[0]).sin());
        assert_eq!(f.derivative(1).linf(), 0.0);
        assert_eq!(f.derivative(2).linf(), 0.0);
    }

    #[test]
    fn derivative_2d_product_matches_symbolic() {
        let g = Grid::new(2, 32).unwrap();
        let f = ScalarField::from_fn(&g, |x| (TAU * x[0]).sin() * (2.0 * TAU * x[1]).cos());
        let d0 = f.derivative(0);
        let d1 = f.derivative(1);
        let e0 = ScalarField::from_fn(&g, |x| TAU * (TAU * x[0]).cos() * (2.0 * TAU * x[1]).cos());
        let e1 = ScalarField::from_fn(&g, |x| {
            -2.0 * TAU * (TAU * x[0]).sin() * (2.0 * TAU * x[1]).sin()
        });
        assert!(d0.sub(&e0).linf() <= 1e-11);
        assert!(d1.sub(&e1).linf() <= 1e-11);
    }

    #[test]
    fn mixed_partials_commute() {
        let g = Grid::new(2, 32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let f = random_band_limited(&g, 4, 1.0, &mut rng);
        let dxy = f.derivative(0).derivative(1);
        let dyx = f.derivative(1).derivative(0);
        assert!(dxy.sub(&dyx).linf() <= 1e-11);
    }

    #[test]
    fn poisson_single_mode() {
        let g = grid1(32);
        let rhs = ScalarField::from_fn(&g, |x| (TAU * x[0]).sin());
        let psi = rhs.poisson_solve_mean_zero().unwrap();
        let exact = ScalarField::from_fn(&g, |x| -(TAU * x[0]).sin() / (4.0 * PI * PI));
        assert!(psi.sub(&exact).linf() <= 1e-13);
    }

    #[test]
    fn poisson_zero_rhs() {
        let g = grid1(16);
        let psi = ScalarField::zeros(&g).poisson_solve_mean_zero().unwrap();
        assert_eq!(psi.linf(), 0.0);
    }

    #[test]
    fn poisson_roundtrip_random() {
        let g = Grid::new(2, 32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rhs = random_band_limited(&g, 5, 1.0, &mut rng);
        let psi = rhs.poisson_solve_mean_zero().unwrap();
        assert!(psi.laplacian().sub(&rhs).linf() <= 1e-10);
        assert!(psi.mean().abs() <= 1e-14);
    }

    #[test]
    fn poisson_rejects_nonzero_mean() {
        let g = grid1(16);
        let rhs = ScalarField::constant(&g, 1.0);
        match rhs.poisson_solve_mean_zero() {
            Err(EmxError::NonZeroMean { .. }) => {}
            other => panic!("expected NonZeroMean, got {other:?}"),
        }
    }

    #[test]
    fn leray_kills_gradients() {
        let g = Grid::new(2, 32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let gsc = random_band_limited(&g, 4, 1.0, &mut rng);
        let v = gsc.gradient();
        assert!(v.leray_project().linf() <= 1e-11);
    }

    #[test]
    fn leray_preserves_divergence_free() {
        let g = grid1(32);
        let v = VectorField::from_fn(&g, |x| [0.0, (TAU * x[0]).sin(), 0.0]);
        let pv = v.leray_project();
        assert!(pv.sub(&v).linf() <= 1e-13);
    }

    #[test]
    fn leray_is_projection() {
        let g = Grid::new(2, 32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let v = VectorField::from_components(std::array::from_fn(|_| {
            random_band_limited(&g, 4, 1.0, &mut rng)
        }));
        let pv = v.leray_project();
        assert!(pv.divergence().linf() <= 1e-10);
        assert!(pv.leray_project().sub(&pv).linf() <= 1e-12);
    }

    #[test]
    fn sobolev_norm_examples() {
        let g = grid1(32);
        let f = ScalarField::from_fn(&g, |x| (TAU * x[0]).sin());
        assert!((f.sobolev_norm(0) - (0.5f64).sqrt()).abs() <= 1e-13);
        let expected = ((1.0 + 4.0 * PI * PI) / 2.0).sqrt();
        assert!((f.sobolev_norm(1) - expected).abs() <= 1e-12);
        // cross check: ||f||_1^2 == ||f||^2 + ||grad f||^2
        let alt = (f.dot(&f) + f.gradient().l2_norm().powi(2)).sqrt();
        assert!((f.sobolev_norm(1) - alt).abs() <= 1e-12);
        let c = ScalarField::constant(&g, -2.5);
        assert!((c.sobolev_norm(0) - 2.5).abs() <= 1e-13);
        assert!((c.sobolev_norm(3) - 2.5).abs() <= 1e-13);
    }

    #[test]
    fn dealias_examples() {
        let g = grid1(32);
        // band-limited field untouched
        let f = ScalarField::from_fn(&g, |x| (3.0 * TAU * x[0]).cos());
        assert!(f.dealias().sub(&f).linf() <= 1e-13);
        // Nyquist mode removed
        let ny = ScalarField::from_fn(&g, |x| (16.0 * TAU * x[0]).cos());
        assert!(ny.dealias().linf() <= 1e-13);
        // resolvable product represented exactly after dealiasing
        let m = 4.0;
        let s = ScalarField::from_fn(&g, |x| (m * TAU * x[0]).sin());
        let prod = s.mul(&s).dealias();
        let exact = ScalarField::from_fn(&g, |x| (1.0 - (2.0 * m * TAU * x[0]).cos()) / 2.0);
        assert!(prod.sub(&exact).linf() <= 1e-13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn roundtrip_real_spectral_real(seed in 0u64..1000) {
            let g = Grid::new(2, 16).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = random_band_limited(&g, 5, 1.0, &mut rng);
            let back = g.inverse(&g.forward(&f));
            prop_assert!(back.sub(&f).linf() <= 1e-13 * f.linf().max(1.0));
        }

        #[test]
        fn sobolev_monotone_in_order(seed in 0u64..1000, s in 0usize..4) {
            let g = grid1(16);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = random_band_limited(&g, 4, 1.0, &mut rng);
            prop_assert!(f.sobolev_norm(s) <= f.sobolev_norm(s + 1) + 1e-12);
        }

        #[test]
        fn leray_divergence_free(seed in 0u64..1000) {
            let g = grid1(16);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = VectorField::from_components(std::array::from_fn(|_| {
                random_band_limited(&g, 4, 1.0, &mut rng)
            }));
            let pv = v.leray_project();
            prop_assert!(pv.divergence().linf() <= 1e-10);
        }
    }
}
