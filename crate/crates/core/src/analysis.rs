//! Interpretation of a fitted operator: leading features, impulse responses
//! of linear functionals, the moment basis and variance decompositions.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::far::FarModel;
use crate::function_space::{
    adjoint, apply_operator, compose, inner, project_zero_integral, quantile, svd_operator, GridFunction, GridSpec, OperatorRep,
};

/// Highest moment order the basis builder accepts.
pub const MAX_MOMENT_ORDER: usize = 10;

const METRIC_FLOOR: f64 = 1e-10;
const VARIANCE_FLOOR: f64 = 1e-14;

/// Leading singular structure of an operator.
#[derive(Debug, Clone)]
pub struct LeadingFeatures {
    /// Right singular functions: directions in which the past state acts.
    pub progressive: Vec<GridFunction>,
    /// Left singular functions: directions of the response.
    pub regressive: Vec<GridFunction>,
    pub strengths: Vec<f64>,
}

pub fn leading_features(a: &OperatorRep, m: usize) -> Result<LeadingFeatures> {
    let svd = svd_operator(a, m)?;
    Ok(LeadingFeatures {
        progressive: (0..svd.len()).map(|k| svd.right(k)).collect(),
        regressive: (0..svd.len()).map(|k| svd.left(k)).collect(),
        strengths: svd.values().to_vec(),
    })
}

/// Response of `⟨v, w_t⟩` to a unit Dirac impulse added to `w_{t−1}` at each
/// grid point, i.e. `(A* v)(x)`.
pub fn impulse_response(a: &OperatorRep, v: &GridFunction) -> Result<GridFunction> {
    apply_operator(&adjoint(a), v)
}

/// `x ↦ x^p`.
pub fn moment_functional(p: u32, grid: &Arc<GridSpec>) -> Result<GridFunction> {
    if p == 0 {
        return Err(Error::invalid("moment order must be at least 1"));
    }
    GridFunction::from_fn(grid, |x| x.powi(p as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailRegion {
    /// `(-∞, τ]`
    Left(f64),
    /// `[τ, ∞)`
    Right(f64),
    /// Both tails outside `(τ_lo, τ_hi)`.
    TwoSided(f64, f64),
}

/// Indicator values whose quadrature inner product with a grid function
/// integrates its piecewise-linear interpolant exactly over the region.
pub fn tail_indicator(grid: &Arc<GridSpec>, region: TailRegion) -> Result<GridFunction> {
    let check = |tau: f64| {
        if tau.is_finite() && tau >= grid.a() && tau <= grid.b() {
            Ok(())
        } else {
            Err(Error::ThresholdOutOfSupport { tau, a: grid.a(), b: grid.b() })
        }
    };
    let values = match region {
        TailRegion::Left(tau) => {
            check(tau)?;
            left_weights(grid, tau)
        }
        TailRegion::Right(tau) => {
            check(tau)?;
            left_weights(grid, tau).into_iter().map(|c| 1.0 - c).collect()
        }
        TailRegion::TwoSided(lo, hi) => {
            check(lo)?;
            check(hi)?;
            if lo > hi {
                return Err(Error::invalid(format!("two-sided thresholds out of order: {lo} > {hi}")));
            }
            left_weights(grid, lo).into_iter().zip(left_weights(grid, hi)).map(|(l, r)| l + 1.0 - r).collect()
        }
    };
    GridFunction::new(grid.clone(), values)
}

fn left_weights(grid: &GridSpec, tau: f64) -> Vec<f64> {
    let n = grid.n();
    let h = grid.h();
    let s = ((tau - grid.a()) / h).clamp(0.0, (n - 1) as f64);
    let full = (s.floor() as usize).min(n - 1);
    let frac = s - full as f64;
    let mut q = vec![0.0; n];
    for j in 0..full {
        q[j] += h / 2.0;
        q[j + 1] += h / 2.0;
    }
    if full < n - 1 && frac > 0.0 {
        q[full] += h * (frac - frac * frac / 2.0);
        q[full + 1] += h * frac * frac / 2.0;
    }
    q.iter().zip(grid.weights()).map(|(qi, w)| qi / w).collect()
}

/// A named test function `v`: a moment `x^p` or a tail indicator.
///
/// The text form is `moment:P`, `left:TAU`, `right:TAU` or `two_sided:LO,HI`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Functional {
    Moment(u32),
    Tail(TailRegion),
}

impl Functional {
    pub fn build(&self, grid: &Arc<GridSpec>) -> Result<GridFunction> {
        match *self {
            Functional::Moment(p) => moment_functional(p, grid),
            Functional::Tail(region) => tail_indicator(grid, region),
        }
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Functional::Moment(p) => write!(f, "moment:{p}"),
            Functional::Tail(TailRegion::Left(t)) => write!(f, "left:{t}"),
            Functional::Tail(TailRegion::Right(t)) => write!(f, "right:{t}"),
            Functional::Tail(TailRegion::TwoSided(lo, hi)) => write!(f, "two_sided:{lo},{hi}"),
        }
    }
}

impl FromStr for Functional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse functional '{s}'"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        match kind.trim() {
            "moment" => {
                let p: u32 = arg.trim().parse().map_err(|_| bad())?;
                if p == 0 {
                    return Err(bad());
                }
                Ok(Functional::Moment(p))
            }
            "left" => Ok(Functional::Tail(TailRegion::Left(num(arg)?))),
            "right" => Ok(Functional::Tail(TailRegion::Right(num(arg)?))),
            "two_sided" => {
                let (lo, hi) = arg.split_once(',').ok_or_else(bad)?;
                Ok(Functional::Tail(TailRegion::TwoSided(num(lo)?, num(hi)?)))
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Functional {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Functional> for String {
    fn from(f: Functional) -> String {
        f.to_string()
    }
}

/// Default tail thresholds: the 5th and 95th percentiles of a density.
pub fn default_tail_thresholds(mean_density: &GridFunction) -> Result<(f64, f64)> {
    Ok((quantile(mean_density, 0.05)?, quantile(mean_density, 0.95)?))
}

/// `⟨f, Q g⟩`.
pub fn quadratic_form(f: &GridFunction, q: &OperatorRep, g: &GridFunction) -> Result<f64> {
    inner(f, &apply_operator(q, g)?)
}

/// Polynomials `u_1 … u_kmax` with zero integral, orthonormal under `⟨·, Q·⟩`.
#[derive(Debug, Clone)]
pub struct MomentBasis {
    grid: Arc<GridSpec>,
    functions: Vec<GridFunction>,
    gram: OperatorRep,
}

impl MomentBasis {
    pub fn functions(&self) -> &[GridFunction] {
        &self.functions
    }

    pub fn kmax(&self) -> usize {
        self.functions.len()
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn gram_operator(&self) -> &OperatorRep {
        &self.gram
    }
}

/// Modified Gram–Schmidt on the monomials in the `Q` metric, with one
/// reorthogonalization pass.
///
/// Monomials are taken in the rescaled variable `(x − (a+b)/2) / ((b−a)/2)`,
/// which spans the same polynomial spaces and keeps high orders well scaled.
pub fn moment_basis(q: &OperatorRep, grid: &Arc<GridSpec>, kmax: usize) -> Result<MomentBasis> {
    if kmax == 0 || kmax > MAX_MOMENT_ORDER {
        return Err(Error::invalid(format!("kmax must lie in 1..={MAX_MOMENT_ORDER}, got {kmax}")));
    }
    if !q.grid().same_as(grid) {
        return Err(Error::GridMismatch);
    }
    let mid = 0.5 * (grid.a() + grid.b());
    let half = 0.5 * grid.length();
    let mut functions: Vec<GridFunction> = Vec::with_capacity(kmax);
    let mut reference = q.hs_norm();
    for k in 1..=kmax {
        let mut c = project_zero_integral(&GridFunction::from_fn(grid, |x| ((x - mid) / half).powi(k as i32))?);
        for _ in 0..2 {
            for u in &functions {
                let coef = quadratic_form(u, q, &c)?;
                c = c.add_scaled(-coef, u)?;
            }
            c = project_zero_integral(&c);
        }
        let norm2 = quadratic_form(&c, q, &c)?;
        let rayleigh = norm2 / inner(&c, &c)?;
        if !(rayleigh > METRIC_FLOOR * reference) {
            return Err(Error::DegenerateMetric { k });
        }
        if k == 1 {
            reference = rayleigh;
        }
        functions.push(c.scale(1.0 / norm2.sqrt()));
    }
    Ok(MomentBasis { grid: grid.clone(), functions, gram: q.clone() })
}

/// `R²_v` clipped to `[0, 1]`, with the unclipped value kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub value: f64,
    pub raw: f64,
}

fn variance_of(v: &GridFunction, q: &OperatorRep) -> Result<f64> {
    let var = quadratic_form(v, q, v)?;
    let scale = q.hs_norm() * inner(v, v)?;
    if !(var > VARIANCE_FLOOR * scale) || !(var > 0.0) {
        return Err(Error::ZeroVariance { variance: var });
    }
    Ok(var)
}

/// `R²_v = 1 − ⟨v, Σv⟩ / ⟨v, Qv⟩`.
pub fn r_squared(v: &GridFunction, q: &OperatorRep, sigma: &OperatorRep) -> Result<RSquared> {
    let var = variance_of(v, q)?;
    let raw = 1.0 - quadratic_form(v, sigma, v)? / var;
    Ok(RSquared { value: raw.clamp(0.0, 1.0), raw })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// `π_v(k)` for `k = 1..=kmax`.
    pub pi: Vec<f64>,
    /// `⟨v, Qv⟩`.
    pub variance: f64,
    pub r_squared: Option<RSquared>,
    /// `1 − R²_v` when `Σ` was supplied.
    pub residual_share: Option<f64>,
}

/// `π_v(k) = ⟨v, A Q u_k⟩² / ⟨v, Qv⟩`.
pub fn variance_decomposition(
    v: &GridFunction,
    a: &OperatorRep,
    q: &OperatorRep,
    basis: &MomentBasis,
    sigma: Option<&OperatorRep>,
) -> Result<DecompositionReport> {
    let var = variance_of(v, q)?;
    let response = impulse_response(a, v)?;
    let pi = basis.functions().iter().map(|u| Ok(quadratic_form(&response, q, u)?.powi(2) / var)).collect::<Result<Vec<_>>>()?;
    let r2 = sigma.map(|s| r_squared(v, q, s)).transpose()?;
    Ok(DecompositionReport { pi, variance: var, r_squared: r2, residual_share: r2.map(|r| 1.0 - r.value) })
}

/// Plug-in decomposition for a fitted model, using `Â_K`, `Q̂` and `Σ̂`.
pub fn decompose_model(model: &FarModel, v: &GridFunction, kmax: usize) -> Result<DecompositionReport> {
    let basis = moment_basis(model.covariance(), model.grid(), kmax)?;
    variance_decomposition(v, model.operator(), model.covariance(), &basis, Some(model.noise_covariance()))
}

/// Stationary covariance `Q = Σ_{j≥0} A^j Σ (A*)^j`, summed until the next
/// term falls below `tol` relative to the partial sum. Returns the operator
/// and the number of terms used.
pub fn stationary_covariance(a: &OperatorRep, sigma: &OperatorRep, tol: f64, max_terms: usize) -> Result<(OperatorRep, usize)> {
    let a_star = adjoint(a);
    let mut term = sigma.clone();
    let mut total = sigma.clone();
    for j in 1..max_terms {
        term = compose(&compose(a, &term)?, &a_star)?;
        total = total.add(&term)?;
        if term.max_abs() <= tol * total.max_abs() {
            return Ok((total.symmetrized(), j + 1));
        }
    }
    Err(Error::UnstableGenerator { step: max_terms, norm: term.max_abs() })
}
