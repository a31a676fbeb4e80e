//! Estimation of the functional autoregression `w_t = A w_{t-1} + ε_t` on
//! demeaned densities.
//!
//! The operator is recovered from `P = A Q` by inverting the covariance
//! operator on the span of its leading `K` eigenfunctions:
//! `Â_K = P̂ Q̂_K⁺`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::density::DensityPanel;
use crate::error::{Error, Result};
use crate::function_space::{
    apply_operator, compose, eigh_operator, project_zero_integral, EigenSystem, GridFunction, GridSpec, OperatorRep,
};

/// Eigenvalues at or below this fraction of the leading one are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Covariance below `(NUMERICAL_ZERO · ‖f̄‖)²` is rounding noise from demeaning.
const NUMERICAL_ZERO: f64 = 1e-12;

/// Minimum number of periods accepted by [`fit`].
pub const MIN_FIT_PERIODS: usize = 5;

fn shared_grid(fs: &[GridFunction]) -> Result<Arc<GridSpec>> {
    let first = fs.first().ok_or(Error::EmptyPanel)?;
    let grid = first.grid().clone();
    if fs.iter().any(|f| !f.grid().same_as(&grid)) {
        return Err(Error::GridMismatch);
    }
    Ok(grid)
}

/// Stacks functions as the columns of an `n × T` matrix.
fn columns(fs: &[GridFunction], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, fs.len(), |i, t| fs[t].values()[i])
}

pub fn mean_density(densities: &[GridFunction]) -> Result<GridFunction> {
    let grid = shared_grid(densities)?;
    let t = densities.len() as f64;
    let mut sum = vec![0.0; grid.n()];
    for f in densities {
        for (s, v) in sum.iter_mut().zip(f.values()) {
            *s += v;
        }
    }
    GridFunction::new(grid, sum.into_iter().map(|s| s / t).collect())
}

/// `ŵ_t = f̂_t − f̄`, projected onto the zero-integral subspace.
pub fn demean(densities: &[GridFunction], mean: &GridFunction) -> Result<Vec<GridFunction>> {
    densities.iter().map(|f| Ok(project_zero_integral(&f.sub(mean)?))).collect()
}

/// `Q̂ = (1/T) Σ_t ŵ_t ⊗ ŵ_t`.
pub fn covariance_operator(states: &[GridFunction]) -> Result<OperatorRep> {
    covariance_with_divisor(states, states.len())
}

fn covariance_with_divisor(states: &[GridFunction], divisor: usize) -> Result<OperatorRep> {
    let grid = shared_grid(states)?;
    let x = columns(states, grid.n());
    let k = (&x * x.transpose()) / divisor as f64;
    Ok(OperatorRep::new(grid, k)?.symmetrized())
}

/// `P̂ = (1/T) Σ_{t≥2} ŵ_t ⊗ ŵ_{t−1}`, keeping the divisor `T` although only
/// `T − 1` lagged pairs exist.
pub fn lag1_cross_covariance(states: &[GridFunction]) -> Result<OperatorRep> {
    if states.len() < 2 {
        return Err(Error::TooFewPeriods { needed: 2, got: states.len() });
    }
    let grid = shared_grid(states)?;
    let t = states.len();
    let next = columns(&states[1..], grid.n());
    let prev = columns(&states[..t - 1], grid.n());
    OperatorRep::new(grid, (next * prev.transpose()) / t as f64)
}

pub fn principal_components(q: &OperatorRep) -> Result<EigenSystem> {
    eigh_operator(q)
}

/// Number of eigenvalues above the rank cutoff.
pub fn usable_rank(eigen: &EigenSystem) -> usize {
    let ev = eigen.eigenvalues();
    match ev.first() {
        Some(&l1) if l1 > 0.0 => ev.iter().take_while(|&&l| l > RANK_CUTOFF * l1).count(),
        _ => 0,
    }
}

/// `Q̂_K⁺ = Σ_{k≤K} λ̂_k⁻¹ v̂_k ⊗ v̂_k`.
pub fn regularized_inverse(eigen: &EigenSystem, k: usize) -> Result<OperatorRep> {
    if k == 0 {
        return Err(Error::invalid("truncation level K must be at least 1"));
    }
    let ev = eigen.eigenvalues();
    let lambda_1 = ev.first().copied().unwrap_or(0.0);
    let lambda_k = ev.get(k - 1).copied().unwrap_or(0.0);
    if !(lambda_1 > 0.0) || !(lambda_k > RANK_CUTOFF * lambda_1) {
        return Err(Error::RankDeficient { k, lambda_k, lambda_1 });
    }
    let v = eigen.vectors().columns(0, k);
    let mut scaled = v.clone_owned();
    for (j, lambda) in ev.iter().take(k).enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / lambda);
    }
    OperatorRep::new(eigen.grid().clone(), scaled * v.transpose())
}

/// `Â_K = P̂ ∘ Q̂_K⁺`.
pub fn estimate_operator(p: &OperatorRep, q_plus: &OperatorRep) -> Result<OperatorRep> {
    compose(p, q_plus)
}

/// `ε̂_t = ŵ_t − Â ŵ_{t−1}` for `t = 2..T`.
pub fn residuals(states: &[GridFunction], a: &OperatorRep) -> Result<Vec<GridFunction>> {
    if states.len() < 2 {
        return Err(Error::TooFewPeriods { needed: 2, got: states.len() });
    }
    states.windows(2).map(|pair| pair[1].sub(&apply_operator(a, &pair[0])?)).collect()
}

/// `Σ̂ = (1/T) Σ ε̂_t ⊗ ε̂_t` where `T` is the number of fitted periods.
pub fn noise_covariance(residuals: &[GridFunction], periods: usize) -> Result<OperatorRep> {
    if residuals.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    if periods == 0 {
        return Err(Error::invalid("noise covariance divisor must be positive"));
    }
    covariance_with_divisor(residuals, periods)
}

/// Sample moments of a density panel; fitting several truncation levels
/// shares one eigendecomposition.
#[derive(Debug, Clone)]
pub struct FarMoments {
    grid: Arc<GridSpec>,
    mean: GridFunction,
    states: Vec<GridFunction>,
    q: OperatorRep,
    p: OperatorRep,
    eigen: EigenSystem,
}

impl FarMoments {
    pub fn new(densities: &[GridFunction]) -> Result<Self> {
        if densities.len() < MIN_FIT_PERIODS {
            return Err(Error::TooFewPeriods { needed: MIN_FIT_PERIODS, got: densities.len() });
        }
        let mean = mean_density(densities)?;
        let states = demean(densities, &mean)?;
        Self::from_states(mean, states)
    }

    /// Starts from a mean and already demeaned states.
    pub fn from_states(mean: GridFunction, states: Vec<GridFunction>) -> Result<Self> {
        if states.len() < MIN_FIT_PERIODS {
            return Err(Error::TooFewPeriods { needed: MIN_FIT_PERIODS, got: states.len() });
        }
        let grid = shared_grid(&states)?;
        if !mean.grid().same_as(&grid) {
            return Err(Error::GridMismatch);
        }
        let q = covariance_operator(&states)?;
        let p = lag1_cross_covariance(&states)?;
        let eigen = principal_components(&q)?;
        Ok(Self { grid, mean, states, q, p, eigen })
    }

    pub fn eigen(&self) -> &EigenSystem {
        &self.eigen
    }

    pub fn states(&self) -> &[GridFunction] {
        &self.states
    }

    pub fn mean(&self) -> &GridFunction {
        &self.mean
    }

    fn is_numerically_flat(&self) -> bool {
        let floor = (NUMERICAL_ZERO * self.mean.norm()).powi(2);
        self.eigen.eigenvalues().first().is_none_or(|&l| l <= floor)
    }

    pub fn usable_rank(&self) -> usize {
        if self.is_numerically_flat() {
            0
        } else {
            usable_rank(&self.eigen)
        }
    }

    pub fn fit(&self, k: usize) -> Result<FarModel> {
        if self.is_numerically_flat() {
            let ev = self.eigen.eigenvalues();
            return Err(Error::RankDeficient {
                k,
                lambda_k: ev.get(k.saturating_sub(1)).copied().unwrap_or(0.0),
                lambda_1: ev.first().copied().unwrap_or(0.0),
            });
        }
        let q_plus = regularized_inverse(&self.eigen, k)?;
        let a_hat = estimate_operator(&self.p, &q_plus)?;
        let eps = residuals(&self.states, &a_hat)?;
        let sigma_hat = noise_covariance(&eps, self.states.len())?;
        Ok(FarModel {
            grid: self.grid.clone(),
            mean: self.mean.clone(),
            eigen: self.eigen.clone(),
            k,
            a_hat,
            q_hat: self.q.clone(),
            p_hat: self.p.clone(),
            sigma_hat,
            residuals: eps,
            sample_size: self.states.len(),
            first_state: self.states[0].clone(),
            last_state: self.states[self.states.len() - 1].clone(),
        })
    }
}

/// Everything produced by one fit.
#[derive(Debug, Clone)]
pub struct FarModel {
    pub(crate) grid: Arc<GridSpec>,
    pub(crate) mean: GridFunction,
    pub(crate) eigen: EigenSystem,
    pub(crate) k: usize,
    pub(crate) a_hat: OperatorRep,
    pub(crate) q_hat: OperatorRep,
    pub(crate) p_hat: OperatorRep,
    pub(crate) sigma_hat: OperatorRep,
    pub(crate) residuals: Vec<GridFunction>,
    pub(crate) sample_size: usize,
    pub(crate) first_state: GridFunction,
    pub(crate) last_state: GridFunction,
}

impl FarModel {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    /// The sample mean density `f̄`.
    pub fn mean(&self) -> &GridFunction {
        &self.mean
    }

    pub fn eigen(&self) -> &EigenSystem {
        &self.eigen
    }

    /// Truncation level `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn operator(&self) -> &OperatorRep {
        &self.a_hat
    }

    pub fn covariance(&self) -> &OperatorRep {
        &self.q_hat
    }

    pub fn cross_covariance(&self) -> &OperatorRep {
        &self.p_hat
    }

    pub fn noise_covariance(&self) -> &OperatorRep {
        &self.sigma_hat
    }

    pub fn residuals(&self) -> &[GridFunction] {
        &self.residuals
    }

    /// Number of periods `T` the model was fitted on.
    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    /// `ŵ_1`, the first demeaned period.
    pub fn first_state(&self) -> &GridFunction {
        &self.first_state
    }

    /// `ŵ_T`, the last demeaned period.
    pub fn last_state(&self) -> &GridFunction {
        &self.last_state
    }

    /// Share of the trace carried by each eigenvalue.
    pub fn explained_variance(&self) -> Vec<f64> {
        let ev = self.eigen.eigenvalues();
        let total: f64 = ev.iter().sum();
        if total > 0.0 {
            ev.iter().map(|l| l / total).collect()
        } else {
            vec![0.0; ev.len()]
        }
    }
}

/// Fits the model with truncation level `k`.
pub fn fit(panel: &DensityPanel, k: usize) -> Result<FarModel> {
    FarMoments::new(panel.densities())?.fit(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::{inner, make_grid, outer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fn(grid: &Arc<GridSpec>, rng: &mut ChaCha8Rng) -> GridFunction {
        GridFunction::new(grid.clone(), (0..grid.n()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_states(grid: &Arc<GridSpec>, t: usize, seed: u64) -> Vec<GridFunction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| project_zero_integral(&random_fn(grid, &mut rng))).collect()
    }

    fn bump_density(grid: &Arc<GridSpec>, center: f64, width: f64) -> GridFunction {
        let f = GridFunction::from_fn(grid, |x| (-(x - center).powi(2) / (2.0 * width * width)).exp()).unwrap();
        f.scale(1.0 / f.integral())
    }

    #[test]
    fn mean_of_panels() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let d = bump_density(&g, 0.4, 0.1);
        assert!(mean_density(&[d.clone(), d.clone()]).unwrap().max_abs_diff(&d).unwrap() < 1e-15);
        let u = GridFunction::constant(&g, 1.0);
        assert!(mean_density(&[u.clone(), u.clone()]).unwrap().max_abs_diff(&u).unwrap() == 0.0);
        assert!(matches!(mean_density(&[]), Err(Error::EmptyPanel)));

        let panel: Vec<GridFunction> = (0..50).map(|i| bump_density(&g, 0.3 + 0.005 * i as f64, 0.1)).collect();
        let m = mean_density(&panel).unwrap();
        for i in 0..g.n() {
            let mut naive = 0.0;
            for f in &panel {
                naive += f.values()[i];
            }
            assert!((m.values()[i] - naive / 50.0).abs() < 1e-14);
        }
        assert!((m.integral() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn demeaning() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let d = bump_density(&g, 0.5, 0.2);
        let w = demean(&[d.clone(), d.clone()], &d).unwrap();
        assert!(w.iter().all(|x| x.max_abs() == 0.0));

        let panel: Vec<GridFunction> = (0..7).map(|i| bump_density(&g, 0.2 + 0.1 * i as f64, 0.15)).collect();
        let m = mean_density(&panel).unwrap();
        let w = demean(&panel, &m).unwrap();
        let mut total = GridFunction::zeros(&g);
        for (x, f) in w.iter().zip(&panel) {
            assert!(x.integral().abs() < 1e-12);
            assert!(x.max_abs_diff(&f.sub(&m).unwrap()).unwrap() < 1e-12);
            total = total.add(x).unwrap();
        }
        assert!(total.max_abs() < 1e-10);
    }

    #[test]
    fn covariance_forms() {
        let g = make_grid(0.0, 1.0, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_fn(&g, &mut rng);
        let q = covariance_operator(&vec![w.clone(); 6]).unwrap();
        assert!(q.max_abs_diff(&outer(&w, &w).unwrap()).unwrap() < 1e-12);
        let zeros = vec![GridFunction::zeros(&g); 4];
        assert_eq!(covariance_operator(&zeros).unwrap().max_abs(), 0.0);

        let states = random_states(&g, 20, 2);
        let q = covariance_operator(&states).unwrap();
        for _ in 0..10 {
            let h = random_fn(&g, &mut rng);
            let lhs = inner(&h, &apply_operator(&q, &h).unwrap()).unwrap();
            let rhs: f64 = states.iter().map(|s| inner(s, &h).unwrap().powi(2)).sum::<f64>() / 20.0;
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_covariance_forms() {
        let g = make_grid(0.0, 1.0, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_fn(&g, &mut rng);
        let alternating: Vec<GridFunction> = (0..10).map(|t| if t % 2 == 0 { w.clone() } else { w.scale(-1.0) }).collect();
        let p = lag1_cross_covariance(&alternating).unwrap();
        let expected = outer(&w, &w).unwrap().scale(-9.0 / 10.0);
        assert!(p.max_abs_diff(&expected).unwrap() < 1e-12);
        assert_eq!(lag1_cross_covariance(&vec![GridFunction::zeros(&g); 3]).unwrap().max_abs(), 0.0);
        assert!(matches!(lag1_cross_covariance(std::slice::from_ref(&w)), Err(Error::TooFewPeriods { .. })));

        let states = random_states(&g, 15, 4);
        let p = lag1_cross_covariance(&states).unwrap();
        let h = random_fn(&g, &mut rng);
        let got = apply_operator(&p, &h).unwrap();
        let mut want = GridFunction::zeros(&g);
        for t in 1..states.len() {
            want = want.add_scaled(inner(&states[t - 1], &h).unwrap() / 15.0, &states[t]).unwrap();
        }
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn principal_component_trace() {
        let g = make_grid(0.0, 1.0, 48).unwrap();
        let states = random_states(&g, 12, 5);
        let q = covariance_operator(&states).unwrap();
        let e = principal_components(&q).unwrap();
        let sum: f64 = e.eigenvalues().iter().sum();
        assert!((sum - q.trace()).abs() < 1e-8);
        assert!(usable_rank(&e) <= 12);

        let w = random_fn(&g, &mut ChaCha8Rng::seed_from_u64(6));
        let rank1 = principal_components(&covariance_operator(&vec![w; 5]).unwrap()).unwrap();
        assert_eq!(usable_rank(&rank1), 1);
    }

    #[test]
    fn regularized_inverse_behaviour() {
        let g = make_grid(0.0, 1.0, 48).unwrap();
        let phi = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x).sin()).unwrap();
        let phi = phi.scale(1.0 / phi.norm());
        let e = eigh_operator(&outer(&phi, &phi).unwrap().scale(2.0)).unwrap();
        let inv = regularized_inverse(&e, 1).unwrap();
        assert!(inv.max_abs_diff(&outer(&phi, &phi).unwrap().scale(0.5)).unwrap() < 1e-10);
        assert!(matches!(regularized_inverse(&e, 2), Err(Error::RankDeficient { .. })));

        let states = random_states(&g, 12, 7);
        let e = principal_components(&covariance_operator(&states).unwrap()).unwrap();
        let inv = regularized_inverse(&e, 4).unwrap();
        for j in 0..8 {
            let v = e.eigenfunction(j);
            let got = apply_operator(&inv, &v).unwrap();
            let want = if j < 4 { v.scale(1.0 / e.eigenvalues()[j]) } else { GridFunction::zeros(&g) };
            assert!(got.max_abs_diff(&want).unwrap() < 1e-8 * (1.0 + want.max_abs()));
        }
    }

    #[test]
    fn operator_estimate_with_perfect_persistence() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let states = random_states(&g, 10, 8);
        let q = covariance_operator(&states).unwrap();
        let e = principal_components(&q).unwrap();
        let k = usable_rank(&e);
        let a = estimate_operator(&q, &regularized_inverse(&e, k).unwrap()).unwrap();
        for j in 0..k {
            let v = e.eigenfunction(j);
            assert!(apply_operator(&a, &v).unwrap().max_abs_diff(&v).unwrap() < 1e-6);
        }
        let zero = estimate_operator(&OperatorRep::zeros(&g), &regularized_inverse(&e, 2).unwrap()).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn noiseless_recursion_is_reproduced() {
        // w_t = A w_{t-1} with a rotation-like A on a two-dimensional span.
        let g = make_grid(-1.0, 1.0, 40).unwrap();
        let e1 = project_zero_integral(&GridFunction::from_fn(&g, |x| x).unwrap());
        let e1 = e1.scale(1.0 / e1.norm());
        let e2 = project_zero_integral(&GridFunction::from_fn(&g, |x| x * x).unwrap());
        let e2 = e2.scale(1.0 / e2.norm());
        let a = outer(&e2, &e1)
            .unwrap()
            .scale(0.6)
            .add(&outer(&e1, &e2).unwrap().scale(-0.7))
            .unwrap()
            .add(&outer(&e1, &e1).unwrap().scale(0.2))
            .unwrap();
        let mut states = vec![e1.add_scaled(0.3, &e2).unwrap()];
        for _ in 0..30 {
            let next = apply_operator(&a, states.last().unwrap()).unwrap();
            states.push(next);
        }
        let q = covariance_operator(&states).unwrap();
        let e = principal_components(&q).unwrap();
        let a_hat = estimate_operator(&lag1_cross_covariance(&states).unwrap(), &regularized_inverse(&e, 2).unwrap()).unwrap();
        // The chain decays, so the unpaired last period barely enters Q̂.
        for v in [&e1, &e2] {
            let got = apply_operator(&a_hat, v).unwrap();
            let want = apply_operator(&a, v).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-6 * (1.0 + want.max_abs()), "{}", got.max_abs_diff(&want).unwrap());
        }
    }

    #[test]
    fn residual_rules() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let states = random_states(&g, 6, 9);
        let r = residuals(&states, &OperatorRep::zeros(&g)).unwrap();
        assert_eq!(r.len(), 5);
        for (x, y) in r.iter().zip(&states[1..]) {
            assert_eq!(x.values(), y.values());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = OperatorRep::new(g.clone(), nalgebra::DMatrix::from_fn(32, 32, |_, _| rng.random_range(-0.5..0.5))).unwrap();
        let mut chain = vec![states[0].clone()];
        for _ in 0..5 {
            let next = apply_operator(&a, chain.last().unwrap()).unwrap();
            chain.push(next);
        }
        assert!(residuals(&chain, &a).unwrap().iter().all(|e| e.max_abs() < 1e-10));

        let r = residuals(&states, &a).unwrap();
        for t in 1..states.len() {
            let direct = states[t].sub(&apply_operator(&a, &states[t - 1]).unwrap()).unwrap();
            assert!(r[t - 1].max_abs_diff(&direct).unwrap() < 1e-14);
        }
        assert!(matches!(residuals(&states[..1], &a), Err(Error::TooFewPeriods { .. })));
    }

    #[test]
    fn noise_covariance_rules() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        assert!(matches!(noise_covariance(&[], 3), Err(Error::EmptyResiduals)));
        assert_eq!(noise_covariance(&[GridFunction::zeros(&g)], 2).unwrap().max_abs(), 0.0);
        let eps = random_states(&g, 1, 11).remove(0);
        let s = noise_covariance(std::slice::from_ref(&eps), 4).unwrap();
        assert!(s.max_abs_diff(&outer(&eps, &eps).unwrap().scale(0.25)).unwrap() < 1e-14);
    }

    #[test]
    fn fit_rejects_flat_panels() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let d = bump_density(&g, 0.5, 0.2);
        let panel = DensityPanel::unlabeled(g.clone(), vec![d; 8]).unwrap();
        assert!(matches!(fit(&panel, 1), Err(Error::RankDeficient { .. })));
        let short = DensityPanel::unlabeled(g.clone(), vec![bump_density(&g, 0.5, 0.2); 3]).unwrap();
        assert!(matches!(fit(&short, 1), Err(Error::TooFewPeriods { .. })));
    }

    #[test]
    fn scale_equivariance_of_operator() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let states = random_states(&g, 20, 12);
        let mean = GridFunction::constant(&g, 1.0);
        let base = FarMoments::from_states(mean.clone(), states.clone()).unwrap().fit(3).unwrap();
        let scaled: Vec<GridFunction> = states.iter().map(|s| s.scale(7.5)).collect();
        let other = FarMoments::from_states(mean, scaled).unwrap().fit(3).unwrap();
        let diff = base.operator().max_abs_diff(other.operator()).unwrap();
        assert!(diff < 1e-10 * (1.0 + base.operator().max_abs()), "{diff}");
    }

    #[test]
    fn fitted_model_invariants() {
        let g = make_grid(0.0, 1.0, 32).unwrap();
        let panel: Vec<GridFunction> =
            (0..40).map(|t| bump_density(&g, 0.5 + 0.1 * (t as f64 * 0.7).sin(), 0.1 + 0.02 * (t as f64 * 1.3).cos())).collect();
        let panel = DensityPanel::unlabeled(g.clone(), panel).unwrap();
        let model = fit(&panel, 3).unwrap();
        assert_eq!(model.k(), 3);
        assert_eq!(model.residuals().len(), 39);
        assert_eq!(model.sample_size(), 40);
        assert!(model.residuals().iter().all(|e| e.integral().abs() < 1e-8));
        assert!(model.covariance().max_asymmetry() == 0.0);
        assert!(model.noise_covariance().max_asymmetry() == 0.0);
        let sigma = eigh_operator(model.noise_covariance()).unwrap();
        assert!(sigma.eigenvalues().iter().all(|&l| l >= 0.0));
        let explained = model.explained_variance();
        assert!((explained.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
