//! Discretized L² numerics on a uniform grid.
//!
//! Every function is stored by its values on a shared [`GridSpec`] and every
//! integral operator by its kernel evaluated on the grid. Integrals use the
//! trapezoid rule, so the action of an operator with kernel `k` on `g` is
//!
//! ```text
//! (K g)(x_i) = Σ_j w_j · k(x_i, x_j) · g(x_j)
//! ```
//!
//! where `w_j` are the quadrature weights. Eigen- and singular-value problems
//! are solved in this weighted geometry (through the `W^{1/2} K W^{1/2}`
//! symmetrization), so eigenfunctions are orthonormal under the quadrature
//! inner product rather than as plain vectors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest grid accepted by [`GridSpec::uniform`].
pub const MIN_GRID_POINTS: usize = 16;

/// Default grid resolution used by the pipelines.
pub const DEFAULT_GRID_POINTS: usize = 512;

/// Relative window inside which slightly negative eigenvalues are clipped to zero.
const PSD_CLIP: f64 = 1e-12;

/// Uniform grid on `[a, b]` with trapezoid weights.
#[derive(Debug, Clone)]
pub struct GridSpec {
    a: f64,
    b: f64,
    points: Vec<f64>,
    weights: Vec<f64>,
}

/// The `(a, b, n)` triple that fully determines a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub a: f64,
    pub b: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn uniform(a: f64, b: f64, n: usize) -> Result<Arc<Self>> {
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return Err(Error::InvalidSupport { a, b });
        }
        if n < MIN_GRID_POINTS {
            return Err(Error::GridTooSmall { n, min: MIN_GRID_POINTS });
        }
        Ok(Arc::new(Self::build(a, b, n)))
    }

    pub fn from_header(header: GridHeader) -> Result<Arc<Self>> {
        Self::uniform(header.a, header.b, header.n)
    }

    fn build(a: f64, b: f64, n: usize) -> Self {
        let h = (b - a) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| a + i as f64 * h).collect();
        points[n - 1] = b;
        let mut weights = vec![h; n];
        weights[0] = h / 2.0;
        weights[n - 1] = h / 2.0;
        Self { a, b, points, weights }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// Grid spacing.
    pub fn h(&self) -> f64 {
        (self.b - self.a) / (self.n() - 1) as f64
    }

    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn header(&self) -> GridHeader {
        GridHeader { a: self.a, b: self.b, n: self.n() }
    }

    /// Two grids are interchangeable when their defining triples agree bitwise.
    pub fn same_as(&self, other: &GridSpec) -> bool {
        std::ptr::eq(self, other)
            || (self.a.to_bits() == other.a.to_bits() && self.b.to_bits() == other.b.to_bits() && self.n() == other.n())
    }
}

/// Shorthand used for `make_grid` style construction.
pub fn make_grid(a: f64, b: f64, n: usize) -> Result<Arc<GridSpec>> {
    GridSpec::uniform(a, b, n)
}

fn check_grids(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// A function represented by its values on a grid.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::invalid(format!("expected {} grid values, got {}", grid.n(), values.len())));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, values })
    }

    /// Builds a function from values already known to be finite and of the right length.
    pub(crate) fn from_raw(grid: Arc<GridSpec>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n());
        Self { grid, values }
    }

    pub fn from_fn(grid: &Arc<GridSpec>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&x| f(x)).collect();
        Self::new(grid.clone(), values)
    }

    pub fn constant(grid: &Arc<GridSpec>, c: f64) -> Self {
        Self::from_raw(grid.clone(), vec![c; grid.n()])
    }

    pub fn zeros(grid: &Arc<GridSpec>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self + c · other`.
    pub fn add_scaled(&self, c: f64, other: &GridFunction) -> Result<Self> {
        check_grids(&self.grid, &other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + c * y).collect();
        Ok(Self::from_raw(self.grid.clone(), values))
    }

    pub fn add(&self, other: &GridFunction) -> Result<Self> {
        self.add_scaled(1.0, other)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    /// Integral of the function over the support, `⟨1, f⟩`.
    pub fn integral(&self) -> f64 {
        self.grid.weights().iter().zip(&self.values).map(|(w, v)| w * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().zip(self.grid.weights()).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> Result<f64> {
        check_grids(&self.grid, &other.grid)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
    }

    /// Linear interpolation between grid points; zero outside the support.
    pub fn interpolate(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x < g.a || x > g.b {
            return 0.0;
        }
        let h = g.h();
        let pos = (x - g.a) / h;
        let i = (pos.floor() as usize).min(g.n() - 2);
        let s = (pos - i as f64).clamp(0.0, 1.0);
        self.values[i] * (1.0 - s) + self.values[i + 1] * s
    }

    pub(crate) fn weighted(&self) -> DVector<f64> {
        DVector::from_iterator(self.values.len(), self.values.iter().zip(self.grid.weights()).map(|(v, w)| v * w))
    }
}

/// Quadrature inner product `Σ_i w_i f_i g_i`.
pub fn inner(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    check_grids(&f.grid, &g.grid)?;
    Ok(f.grid.weights().iter().zip(f.values.iter().zip(&g.values)).map(|(w, (x, y))| w * x * y).sum())
}

/// Removes the constant component so that the result integrates to zero.
pub fn project_zero_integral(f: &GridFunction) -> GridFunction {
    let shift = f.integral() / f.grid.length();
    f.map(|v| v - shift)
}

/// Kernel representation of an integral operator on a grid.
#[derive(Debug, Clone)]
pub struct OperatorRep {
    grid: Arc<GridSpec>,
    kernel: DMatrix<f64>,
}

impl OperatorRep {
    pub fn new(grid: Arc<GridSpec>, kernel: DMatrix<f64>) -> Result<Self> {
        let n = grid.n();
        if kernel.nrows() != n || kernel.ncols() != n {
            return Err(Error::invalid(format!("kernel must be {n}x{n}, got {}x{}", kernel.nrows(), kernel.ncols())));
        }
        if let Some(index) = kernel.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, kernel })
    }

    pub(crate) fn from_raw(grid: Arc<GridSpec>, kernel: DMatrix<f64>) -> Self {
        Self { grid, kernel }
    }

    pub fn from_fn(grid: &Arc<GridSpec>, k: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let p = grid.points();
        let kernel = DMatrix::from_fn(grid.n(), grid.n(), |i, j| k(p[i], p[j]));
        Self::new(grid.clone(), kernel)
    }

    pub fn zeros(grid: &Arc<GridSpec>) -> Self {
        Self::from_raw(grid.clone(), DMatrix::zeros(grid.n(), grid.n()))
    }

    /// The identity operator; its kernel is `δ_ij / w_i`.
    pub fn identity(grid: &Arc<GridSpec>) -> Self {
        let w = grid.weights();
        Self::from_raw(grid.clone(), DMatrix::from_fn(grid.n(), grid.n(), |i, j| if i == j { 1.0 / w[i] } else { 0.0 }))
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn into_kernel(self) -> DMatrix<f64> {
        self.kernel
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_raw(self.grid.clone(), &self.kernel * c)
    }

    pub fn add(&self, other: &OperatorRep) -> Result<Self> {
        check_grids(&self.grid, &other.grid)?;
        Ok(Self::from_raw(self.grid.clone(), &self.kernel + &other.kernel))
    }

    pub fn sub(&self, other: &OperatorRep) -> Result<Self> {
        check_grids(&self.grid, &other.grid)?;
        Ok(Self::from_raw(self.grid.clone(), &self.kernel - &other.kernel))
    }

    pub fn max_abs(&self) -> f64 {
        self.kernel.amax()
    }

    pub fn max_abs_diff(&self, other: &OperatorRep) -> Result<f64> {
        check_grids(&self.grid, &other.grid)?;
        Ok((&self.kernel - &other.kernel).amax())
    }

    /// Hilbert–Schmidt norm, `(∫∫ k(x, y)² dx dy)^{1/2}` under quadrature.
    pub fn hs_norm(&self) -> f64 {
        weighted_sym(&self.kernel, self.grid.weights()).norm()
    }

    /// Trace `∫ k(x, x) dx`.
    pub fn trace(&self) -> f64 {
        self.grid.weights().iter().enumerate().map(|(i, w)| w * self.kernel[(i, i)]).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.kernel.nrows();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for i in (j + 1)..n {
                worst = worst.max((self.kernel[(i, j)] - self.kernel[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the kernel by `(k + kᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self::from_raw(self.grid.clone(), (&self.kernel + self.kernel.transpose()) * 0.5)
    }
}

/// `u ⊗ v`, the operator `g ↦ ⟨v, g⟩ u`.
pub fn outer(u: &GridFunction, v: &GridFunction) -> Result<OperatorRep> {
    check_grids(&u.grid, &v.grid)?;
    let n = u.grid.n();
    let kernel = DMatrix::from_fn(n, n, |i, j| u.values[i] * v.values[j]);
    Ok(OperatorRep::from_raw(u.grid.clone(), kernel))
}

pub fn apply_operator(k: &OperatorRep, g: &GridFunction) -> Result<GridFunction> {
    check_grids(&k.grid, &g.grid)?;
    let out = &k.kernel * g.weighted();
    Ok(GridFunction::from_raw(g.grid.clone(), out.as_slice().to_vec()))
}

pub fn adjoint(k: &OperatorRep) -> OperatorRep {
    OperatorRep::from_raw(k.grid.clone(), k.kernel.transpose())
}

/// Composition `A ∘ B` under quadrature: kernel `k_A · W · k_B`.
pub fn compose(a: &OperatorRep, b: &OperatorRep) -> Result<OperatorRep> {
    check_grids(&a.grid, &b.grid)?;
    let mut scaled = b.kernel.clone();
    for (i, w) in a.grid.weights().iter().enumerate() {
        scaled.row_mut(i).scale_mut(*w);
    }
    Ok(OperatorRep::from_raw(a.grid.clone(), &a.kernel * scaled))
}

/// `W^{1/2} k W^{1/2}`.
fn weighted_sym(kernel: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let s: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    DMatrix::from_fn(kernel.nrows(), kernel.ncols(), |i, j| s[i] * kernel[(i, j)] * s[j])
}

/// Maps a vector of the symmetrized problem back to function values.
fn unweight(column: impl Iterator<Item = f64>, weights: &[f64]) -> Vec<f64> {
    column.zip(weights).map(|(c, w)| c / w.sqrt()).collect()
}

/// Flips `values` so the entry of largest magnitude is positive. Near-ties
/// resolve to the leftmost entry, which keeps symmetric shapes stable.
fn sign_of_convention(values: &[f64]) -> f64 {
    let peak = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 1.0;
    }
    let lead = values.iter().find(|v| v.abs() >= peak * (1.0 - 1e-9)).copied().unwrap_or(peak);
    if lead < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Orthonormal eigenpairs of a self-adjoint operator, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    grid: Arc<GridSpec>,
    eigenvalues: Vec<f64>,
    /// Column `k` holds the values of the k-th eigenfunction.
    vectors: DMatrix<f64>,
}

impl EigenSystem {
    pub(crate) fn from_parts(grid: Arc<GridSpec>, eigenvalues: Vec<f64>, vectors: DMatrix<f64>) -> Result<Self> {
        if vectors.nrows() != grid.n() || vectors.ncols() != eigenvalues.len() {
            return Err(Error::invalid("eigenvector matrix does not match grid and eigenvalue count"));
        }
        Ok(Self { grid, eigenvalues, vectors })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// The k-th eigenfunction, zero-based.
    pub fn eigenfunction(&self, k: usize) -> GridFunction {
        GridFunction::from_raw(self.grid.clone(), self.vectors.column(k).iter().copied().collect())
    }

    /// `Σ_{k<m} λ_k v_k ⊗ v_k`.
    pub fn reconstruct(&self, m: usize) -> OperatorRep {
        let m = m.min(self.len());
        let v = self.vectors.columns(0, m);
        let mut scaled = v.clone_owned();
        for k in 0..m {
            scaled.column_mut(k).scale_mut(self.eigenvalues[k]);
        }
        OperatorRep::from_raw(self.grid.clone(), scaled * v.transpose())
    }
}

/// Solves the weighted symmetric eigenproblem of `k`.
pub fn eigh_operator(k: &OperatorRep) -> Result<EigenSystem> {
    let scale = k.max_abs();
    let asymmetry = k.max_asymmetry();
    if asymmetry > 1e-10 * scale {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let w = k.grid.weights();
    let m = weighted_sym(&k.kernel, w);
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();

    let n = k.grid.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);

    let mut eigenvalues = Vec::with_capacity(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (slot, &idx) in order.iter().enumerate() {
        let mut lambda = eig.eigenvalues[idx];
        if lambda < 0.0 {
            if lambda < -PSD_CLIP * lambda_max {
                return Err(Error::NonPsd { eigenvalue: lambda });
            }
            lambda = 0.0;
        }
        let mut values = unweight(eig.eigenvectors.column(idx).iter().copied(), w);
        let s = sign_of_convention(&values);
        values.iter_mut().for_each(|v| *v *= s);
        vectors.column_mut(slot).copy_from_slice(&values);
        eigenvalues.push(lambda);
    }
    EigenSystem::from_parts(k.grid.clone(), eigenvalues, vectors)
}

/// Leading singular triplets `A ≈ Σ κ_k (u_k ⊗ v_k)`.
#[derive(Debug, Clone)]
pub struct SingularSystem {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
    left: DMatrix<f64>,
    right: DMatrix<f64>,
}

impl SingularSystem {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn left(&self, k: usize) -> GridFunction {
        GridFunction::from_raw(self.grid.clone(), self.left.column(k).iter().copied().collect())
    }

    pub fn right(&self, k: usize) -> GridFunction {
        GridFunction::from_raw(self.grid.clone(), self.right.column(k).iter().copied().collect())
    }

    /// `Σ_{k<m} κ_k u_k ⊗ v_k`.
    pub fn reconstruct(&self, m: usize) -> OperatorRep {
        let m = m.min(self.len());
        let mut u = self.left.columns(0, m).clone_owned();
        for k in 0..m {
            u.column_mut(k).scale_mut(self.values[k]);
        }
        OperatorRep::from_raw(self.grid.clone(), u * self.right.columns(0, m).transpose())
    }
}

/// Top-`m` singular triplets of `k` in the quadrature geometry.
pub fn svd_operator(k: &OperatorRep, m: usize) -> Result<SingularSystem> {
    let n = k.grid.n();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("need 1 <= m <= {n}, got {m}")));
    }
    let w = k.grid.weights();
    let svd = weighted_sym(&k.kernel, w).svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut values = Vec::with_capacity(m);
    let mut left = DMatrix::zeros(n, m);
    let mut right = DMatrix::zeros(n, m);
    for (slot, &idx) in order.iter().take(m).enumerate() {
        let mut l = unweight(u.column(idx).iter().copied(), w);
        let mut r = unweight(v_t.row(idx).iter().copied(), w);
        let s = sign_of_convention(&l);
        l.iter_mut().for_each(|x| *x *= s);
        r.iter_mut().for_each(|x| *x *= s);
        left.column_mut(slot).copy_from_slice(&l);
        right.column_mut(slot).copy_from_slice(&r);
        values.push(svd.singular_values[idx].max(0.0));
    }
    Ok(SingularSystem { grid: k.grid.clone(), values, left, right })
}

pub(crate) fn check_density(f: &GridFunction) -> Result<()> {
    match f.values.iter().position(|&v| v < -1e-12) {
        Some(index) => Err(Error::NegativeDensity { index, value: f.values[index] }),
        None => Ok(()),
    }
}

/// Cumulative trapezoid integral of a density; `F(a) = 0`.
pub fn cdf_from_density(f: &GridFunction) -> Result<GridFunction> {
    check_density(f)?;
    let h = f.grid.h();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(f.values.len());
    out.push(0.0);
    for pair in f.values.windows(2) {
        acc += 0.5 * h * (pair[0].max(0.0) + pair[1].max(0.0));
        out.push(acc);
    }
    Ok(GridFunction::from_raw(f.grid.clone(), out))
}

/// The point where the cumulative distribution first reaches `p`,
/// interpolated linearly between grid points.
pub fn quantile(f: &GridFunction, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {p}")));
    }
    let cdf = cdf_from_density(f)?;
    let x = f.grid.points();
    let c = cdf.values();
    match c.iter().position(|&v| v >= p) {
        None => Ok(f.grid.b),
        Some(0) => Ok(x[0]),
        Some(i) => {
            let (lo, hi) = (c[i - 1], c[i]);
            let s = if hi > lo { (p - lo) / (hi - lo) } else { 0.0 };
            Ok(x[i - 1] + s * (x[i] - x[i - 1]))
        }
    }
}
