//! Rejection sampling from grid densities, simulation of FAR density
//! panels, and the Monte Carlo forecasting study.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{bandwidth, kde, sample_std, Kernel};
use crate::error::{Error, Result};
use crate::far::{mean_density, FarModel, FarMoments};
use crate::forecast::{error_metrics, forecast_one_step, select_k_cv, summarize, to_density, ErrorReport, Predictor};
use crate::function_space::{
    apply_operator, eigh_operator, inner, make_grid, outer, project_zero_integral, GridFunction, GridSpec, OperatorRep,
};

/// Total simulated length used when no burn-in is configured.
pub const DEFAULT_TOTAL_PERIODS: usize = 1000;

/// Running state norms above this multiple of `‖f̄‖` count as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Largest share of study iterations allowed to fail.
pub const MAX_DROPPED_PCT: f64 = 2.0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An independent random stream identified by a seed and a path of
/// indices, so parallel work reproduces serial results.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut key = splitmix64(seed);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(path.last().copied().unwrap_or(0));
    rng
}

/// Draws from a grid density together with the number of proposals used.
#[derive(Debug, Clone)]
pub struct SampleDraws {
    pub values: Vec<f64>,
    pub proposals: u64,
}

/// Rejection sampling with a uniform proposal on the support, using the
/// linear interpolant of `f` as the target.
pub fn acceptance_sample_counted<R: Rng + ?Sized>(f: &GridFunction, n: usize, rng: &mut R) -> Result<SampleDraws> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let f_max = f.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(f_max > 0.0) {
        return Err(Error::DegenerateDensity(format!("maximum value {f_max} is not positive")));
    }
    if let Some(index) = f.values().iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeDensity { index, value: f.values()[index] });
    }
    let grid = f.grid();
    let (a, b) = (grid.a(), grid.b());
    let mut values = Vec::with_capacity(n);
    let mut proposals = 0u64;
    while values.len() < n {
        let x = rng.random_range(a..=b);
        let u: f64 = rng.random();
        proposals += 1;
        if u * f_max <= f.interpolate(x) {
            values.push(x);
        }
    }
    Ok(SampleDraws { values, proposals })
}

pub fn acceptance_sample<R: Rng + ?Sized>(f: &GridFunction, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    Ok(acceptance_sample_counted(f, n, rng)?.values)
}

/// Seeded convenience wrapper around [`acceptance_sample`].
pub fn sample_density(f: &GridFunction, n: usize, seed: u64) -> Result<Vec<f64>> {
    acceptance_sample(f, n, &mut stream_rng(seed, &[]))
}

/// Source of the innovations `ε_t`.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Resampling with replacement from centered residuals.
    Pool(Vec<GridFunction>),
    /// Gaussian noise `Σ_k sqrt(λ_k) z_k φ_k` from the eigenpairs of `Σ`.
    Gaussian(Vec<GridFunction>),
}

impl NoiseModel {
    /// Centers the residuals so the pool has exact mean zero.
    pub fn residual_pool(residuals: &[GridFunction]) -> Result<Self> {
        if residuals.is_empty() {
            return Err(Error::EmptyResiduals);
        }
        let mean = mean_density(residuals)?;
        Ok(NoiseModel::Pool(residuals.iter().map(|r| r.sub(&mean)).collect::<Result<_>>()?))
    }

    pub fn gaussian(sigma: &OperatorRep) -> Result<Self> {
        let eig = eigh_operator(&sigma.symmetrized())?;
        let top = eig.eigenvalues().first().copied().unwrap_or(0.0);
        let factors = eig
            .eigenvalues()
            .iter()
            .enumerate()
            .take_while(|(_, &l)| l > 1e-14 * top && l > 0.0)
            .map(|(k, l)| eig.eigenfunction(k).scale(l.sqrt()))
            .collect();
        Ok(NoiseModel::Gaussian(factors))
    }

    fn draw<R: Rng + ?Sized>(&self, grid: &Arc<GridSpec>, rng: &mut R) -> GridFunction {
        match self {
            NoiseModel::Pool(pool) => pool[rng.random_range(0..pool.len())].clone(),
            NoiseModel::Gaussian(factors) => {
                let mut out = vec![0.0; grid.n()];
                for f in factors {
                    let z: f64 = rng.sample(StandardNormal);
                    for (o, v) in out.iter_mut().zip(f.values()) {
                        *o += z * v;
                    }
                }
                GridFunction::new(grid.clone(), out).expect("finite noise")
            }
        }
    }
}

/// Data-generating process `w_t = A w_{t-1} + ε_t` around a mean density.
#[derive(Debug, Clone)]
pub struct Generator {
    operator: OperatorRep,
    mean: GridFunction,
    noise: NoiseModel,
}

impl Generator {
    pub fn new(operator: OperatorRep, mean: GridFunction, noise: NoiseModel) -> Result<Self> {
        let grid = operator.grid();
        let noise_grid_ok = match &noise {
            NoiseModel::Pool(p) => {
                if p.is_empty() {
                    return Err(Error::EmptyResiduals);
                }
                p.iter().all(|f| f.grid().same_as(grid))
            }
            NoiseModel::Gaussian(fs) => fs.iter().all(|f| f.grid().same_as(grid)),
        };
        if !mean.grid().same_as(grid) || !noise_grid_ok {
            return Err(Error::GridMismatch);
        }
        Ok(Self { operator, mean, noise })
    }

    /// Uses a fitted model's operator, mean and residual pool.
    pub fn from_model(model: &FarModel) -> Result<Self> {
        Self::new(model.operator().clone(), model.mean().clone(), NoiseModel::residual_pool(model.residuals())?)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.operator.grid()
    }

    pub fn operator(&self) -> &OperatorRep {
        &self.operator
    }

    pub fn mean(&self) -> &GridFunction {
        &self.mean
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// Runs the recursion from `w_0 = 0` for `burn_in + count` steps and
    /// keeps the last `count` states.
    pub fn simulate_states<R: Rng + ?Sized>(&self, count: usize, burn_in: usize, rng: &mut R) -> Result<Vec<GridFunction>> {
        let grid = self.grid().clone();
        let limit = DIVERGENCE_FACTOR * self.mean.norm();
        let mut w = GridFunction::zeros(&grid);
        let mut kept = Vec::with_capacity(count);
        for step in 1..=burn_in + count {
            let eps = self.noise.draw(&grid, rng);
            w = apply_operator(&self.operator, &w)?.add(&eps)?;
            let norm = w.norm();
            if !(norm <= limit) {
                return Err(Error::UnstableGenerator { step, norm });
            }
            if step > burn_in {
                kept.push(w.clone());
            }
        }
        Ok(kept)
    }
}

/// Burn-in that makes the total simulated length [`DEFAULT_TOTAL_PERIODS`].
pub fn default_burn_in(count: usize) -> usize {
    DEFAULT_TOTAL_PERIODS.saturating_sub(count)
}

/// Simulates `count` densities `to_density(w_t, f̄)`.
pub fn simulate_far<R: Rng + ?Sized>(
    generator: &Generator,
    count: usize,
    burn_in: usize,
    rng: &mut R,
) -> Result<Vec<GridFunction>> {
    generator.simulate_states(count, burn_in, rng)?.iter().map(|w| to_density(w, &generator.mean)).collect()
}

fn hermite(k: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, x);
    if k == 0 {
        return h0;
    }
    for j in 1..k {
        let h2 = x * h1 - j as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// A synthetic return-like design: a truncated normal mean density moved by
/// an operator that is diagonal in Hermite-type directions.
///
/// Direction `k` is `f̄(x)·He_k(x/σ)`, orthonormalized in `L²` after removing
/// its integral; `persistence[k]` and `noise_sd[k]` are the autoregressive
/// coefficient and innovation standard deviation along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDesign {
    pub a: f64,
    pub b: f64,
    pub grid_n: usize,
    pub scale: f64,
    pub persistence: Vec<f64>,
    pub noise_sd: Vec<f64>,
}

impl Default for SyntheticDesign {
    fn default() -> Self {
        Self {
            a: -5.0,
            b: 5.0,
            grid_n: 128,
            scale: 1.0,
            persistence: vec![0.3, 0.8, 0.5, 0.2],
            noise_sd: vec![0.02, 0.05, 0.025, 0.015],
        }
    }
}

impl SyntheticDesign {
    pub fn validate(&self) -> Result<()> {
        if self.persistence.is_empty() || self.persistence.len() != self.noise_sd.len() {
            return Err(Error::invalid("persistence and noise_sd must be nonempty and equally long"));
        }
        if self.persistence.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::invalid("persistence values must lie strictly inside (-1, 1)"));
        }
        if self.noise_sd.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("noise_sd values must be nonnegative"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::invalid("scale must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<GridSpec>> {
        make_grid(self.a, self.b, self.grid_n)
    }

    pub fn mean_density(&self) -> Result<GridFunction> {
        let grid = self.grid()?;
        let s = self.scale;
        let f = GridFunction::from_fn(&grid, |x| (-(x / s).powi(2) / 2.0).exp())?;
        Ok(f.scale(1.0 / f.integral()))
    }

    /// The orthonormal zero-integral directions the operator acts on.
    pub fn directions(&self) -> Result<Vec<GridFunction>> {
        let f_bar = self.mean_density()?;
        let grid = f_bar.grid().clone();
        let mut out: Vec<GridFunction> = Vec::new();
        for k in 1..=self.persistence.len() {
            let raw = GridFunction::from_fn(&grid, |x| hermite(k, x / self.scale))?;
            let raw = f_bar.values().iter().zip(raw.values()).map(|(f, h)| f * h).collect();
            let mut g = project_zero_integral(&GridFunction::new(grid.clone(), raw)?);
            for _ in 0..2 {
                for u in &out {
                    g = g.add_scaled(-inner(&g, u)?, u)?;
                }
            }
            let norm = g.norm();
            if !(norm > 0.0) {
                return Err(Error::invalid("design directions are linearly dependent on this grid"));
            }
            out.push(g.scale(1.0 / norm));
        }
        Ok(out)
    }

    pub fn operator(&self) -> Result<OperatorRep> {
        let dirs = self.directions()?;
        let mut a = OperatorRep::zeros(dirs[0].grid());
        for (u, rho) in dirs.iter().zip(&self.persistence) {
            a = a.add(&outer(u, u)?.scale(*rho))?;
        }
        Ok(a)
    }

    pub fn noise_covariance(&self) -> Result<OperatorRep> {
        let dirs = self.directions()?;
        let mut s = OperatorRep::zeros(dirs[0].grid());
        for (u, sd) in dirs.iter().zip(&self.noise_sd) {
            s = s.add(&outer(u, u)?.scale(sd * sd))?;
        }
        Ok(s)
    }

    pub fn generator(&self) -> Result<Generator> {
        self.validate()?;
        let dirs = self.directions()?;
        let factors = dirs.iter().zip(&self.noise_sd).map(|(u, sd)| u.scale(*sd)).collect();
        Generator::new(self.operator()?, self.mean_density()?, NoiseModel::Gaussian(factors))
    }
}

/// How the study chooses the truncation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum KChoice {
    Fixed { k: usize },
    CrossValidation { candidates: Vec<usize>, n_validation: usize },
}

impl Default for KChoice {
    fn default() -> Self {
        KChoice::CrossValidation { candidates: (1..=8).collect(), n_validation: 5 }
    }
}

impl KChoice {
    fn validate(&self) -> Result<()> {
        match self {
            KChoice::Fixed { k } if *k == 0 => Err(Error::invalid("fixed K must be at least 1")),
            KChoice::CrossValidation { candidates, n_validation }
                if candidates.is_empty() || candidates.contains(&0) || *n_validation == 0 =>
            {
                Err(Error::invalid("cross-validation needs candidates ≥ 1 and at least one validation period"))
            }
            _ => Ok(()),
        }
    }
}

/// Where the study's data-generating process comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Synthetic(SyntheticDesign),
    /// A saved model file; innovations are resampled from its residuals.
    Model {
        path: std::path::PathBuf,
    },
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::Synthetic(SyntheticDesign::default())
    }
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<Generator> {
        match self {
            GeneratorSpec::Synthetic(d) => d.generator(),
            GeneratorSpec::Model { path } => Generator::from_model(&crate::io::load_model(path)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub t_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub iterations: usize,
    #[serde(default)]
    pub generator: GeneratorSpec,
    pub seed: u64,
    /// Periods discarded before the kept `T + 1`; defaults to filling a total
    /// of 1000 simulated periods.
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default)]
    pub k: KChoice,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.t_values.is_empty() || self.n_values.is_empty() {
            return Err(Error::invalid("t_values and n_values must be nonempty"));
        }
        if self.t_values.iter().chain(&self.n_values).any(|&v| v < 10) {
            return Err(Error::invalid("every T and N must be at least 10"));
        }
        if let GeneratorSpec::Synthetic(d) = &self.generator {
            d.validate()?;
        }
        self.k.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyStat {
    pub predictor: Predictor,
    pub measure: String,
    pub mean: f64,
    pub median: f64,
    pub std_error: f64,
}

/// Aggregates for one `(T, N)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub t: usize,
    pub n: usize,
    pub iterations: usize,
    pub dropped: usize,
    pub stats: Vec<StudyStat>,
}

impl StudyCell {
    pub fn stat(&self, predictor: Predictor, measure: &str) -> Option<&StudyStat> {
        self.stats.iter().find(|s| s.predictor == predictor && s.measure == measure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub cells: Vec<StudyCell>,
}

impl StudyResult {
    pub fn cell(&self, t: usize, n: usize) -> Option<&StudyCell> {
        self.cells.iter().find(|c| c.t == t && c.n == n)
    }
}

/// Errors of the three predictors in one simulated history.
fn study_iteration(
    generator: &Generator,
    t: usize,
    n: usize,
    burn_in: usize,
    k: &KChoice,
    rng: &mut ChaCha8Rng,
) -> Result<[ErrorReport; 3]> {
    let truth = simulate_far(generator, t + 1, burn_in, rng)?;
    let grid = generator.grid();
    let estimated: Vec<GridFunction> = truth[..t]
        .iter()
        .map(|f| {
            let obs = acceptance_sample(f, n, rng)?;
            let h = bandwidth(sample_std(&obs)?, n, Kernel::Normal)?;
            kde(&obs, grid, Kernel::Normal, h)
        })
        .collect::<Result<_>>()?;
    let k = match k {
        KChoice::Fixed { k } => *k,
        KChoice::CrossValidation { candidates, n_validation } => select_k_cv(&estimated, candidates, *n_validation)?,
    };
    let moments = FarMoments::new(&estimated)?;
    let model = moments.fit(k)?;
    let far = to_density(&forecast_one_step(&model, &moments.states()[t - 1])?, model.mean())?;
    let target = &truth[t];
    Ok([error_metrics(&far, target)?, error_metrics(model.mean(), target)?, error_metrics(&estimated[t - 1], target)?])
}

/// Runs every `(T, N)` cell of the study.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    config.validate()?;
    let generator = config.generator.build()?;
    run_study_with(config, &generator)
}

/// Like [`run_study`] with an already built generator.
pub fn run_study_with(config: &StudyConfig, generator: &Generator) -> Result<StudyResult> {
    config.validate()?;
    let mut cells = Vec::new();
    for &t in &config.t_values {
        for &n in &config.n_values {
            let burn_in = config.burn_in.unwrap_or_else(|| default_burn_in(t + 1));
            let outcomes: Vec<Option<[ErrorReport; 3]>> = (0..config.iterations)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream_rng(config.seed, &[t as u64, n as u64, i as u64]);
                    match study_iteration(generator, t, n, burn_in, &config.k, &mut rng) {
                        Ok(r) => Ok(Some(r)),
                        Err(e) if e.is_validation() => Err(e),
                        Err(_) => Ok(None),
                    }
                })
                .collect::<Result<_>>()?;
            let kept: Vec<[ErrorReport; 3]> = outcomes.iter().flatten().copied().collect();
            let dropped = outcomes.len() - kept.len();
            if dropped as f64 > MAX_DROPPED_PCT / 100.0 * config.iterations as f64 {
                return Err(Error::TooManyDropped { dropped, total: config.iterations, limit_pct: MAX_DROPPED_PCT });
            }
            let mut stats = Vec::new();
            for (p, predictor) in Predictor::ALL.iter().enumerate() {
                for (m, name) in ErrorReport::NAMES.iter().enumerate() {
                    let vals: Vec<f64> = kept.iter().map(|r| r[p].as_array()[m]).collect();
                    let s = summarize(&vals);
                    stats.push(StudyStat {
                        predictor: *predictor,
                        measure: name.to_string(),
                        mean: s.mean,
                        median: s.median,
                        std_error: s.std_error,
                    });
                }
            }
            cells.push(StudyCell { t, n, iterations: config.iterations, dropped, stats });
        }
    }
    Ok(StudyResult { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::{cdf_from_density, quantile};

    fn ks_against(draws: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let mut x = draws.to_vec();
        x.sort_by(f64::total_cmp);
        let n = x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = cdf(v);
                (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
            })
            .fold(0.0, f64::max)
    }

    fn triangular(grid: &Arc<GridSpec>) -> GridFunction {
        GridFunction::from_fn(grid, |x| 2.0 * x).unwrap()
    }

    #[test]
    fn uniform_target_accepts_everything() {
        let g = make_grid(0.0, 2.0, 33).unwrap();
        let f = GridFunction::constant(&g, 0.5);
        let mut rng = stream_rng(1, &[]);
        let d = acceptance_sample_counted(&f, 5000, &mut rng).unwrap();
        assert_eq!(d.proposals, 5000);
        assert!(ks_against(&d.values, |x| x / 2.0) < 0.03);
    }

    #[test]
    fn triangular_target_matches_cdf() {
        let g = make_grid(0.0, 1.0, 65).unwrap();
        let f = triangular(&g);
        let draws = sample_density(&f, 10_000, 7).unwrap();
        assert!(ks_against(&draws, |x| x * x) < 0.02);
    }

    #[test]
    fn acceptance_rate_matches_envelope() {
        let g = make_grid(0.0, 1.0, 65).unwrap();
        let f = triangular(&g);
        let mut rng = stream_rng(8, &[]);
        let d = acceptance_sample_counted(&f, 20_000, &mut rng).unwrap();
        let p = 1.0 / (1.0 * 2.0);
        let rate = d.values.len() as f64 / d.proposals as f64;
        let se = (p * (1.0 - p) / d.proposals as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * se, "{rate}");
    }

    #[test]
    fn sampler_rejects_degenerate_targets() {
        let g = make_grid(0.0, 1.0, 33).unwrap();
        let zero = GridFunction::zeros(&g);
        assert!(matches!(sample_density(&zero, 10, 1), Err(Error::DegenerateDensity(_))));
        let f = triangular(&g);
        assert!(sample_density(&f, 0, 1).is_err());
        assert_eq!(sample_density(&f, 100, 3).unwrap(), sample_density(&f, 100, 3).unwrap());
    }

    #[test]
    fn sampler_passes_ks_on_several_targets() {
        // Critical value of the KS test at level 0.01 is about 1.63/sqrt(n).
        let n = 20_000;
        let crit = 1.63 / (n as f64).sqrt();
        let g = make_grid(-3.0, 3.0, 241).unwrap();
        let targets = [
            GridFunction::from_fn(&g, |x| (-x * x / 2.0).exp()).unwrap(),
            GridFunction::from_fn(&g, |x| 3.0 - x.abs()).unwrap(),
            GridFunction::from_fn(&g, |x| (x + 3.0).powi(2)).unwrap(),
            GridFunction::from_fn(&g, |x| (-(x - 1.0).powi(2)).exp() + 0.5 * (-(x + 1.5).powi(2) * 4.0).exp()).unwrap(),
            GridFunction::constant(&g, 1.0),
        ];
        for (i, t) in targets.iter().enumerate() {
            let f = t.scale(1.0 / t.integral());
            let cdf = cdf_from_density(&f).unwrap();
            let draws = sample_density(&f, n, 100 + i as u64).unwrap();
            let ks = ks_against(&draws, |x| cdf.interpolate(x).min(1.0));
            assert!(ks < crit, "target {i}: {ks}");
            // The interpolated CDF of the grid density is the sampler's law.
            assert!(quantile(&f, 0.5).is_ok());
        }
    }

    #[test]
    fn stream_rng_separates_paths() {
        let a: u64 = stream_rng(5, &[1, 2]).random();
        let b: u64 = stream_rng(5, &[2, 1]).random();
        let c: u64 = stream_rng(5, &[1, 2]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_operator_and_zero_noise_reproduce_the_mean() {
        let g = make_grid(0.0, 1.0, 33).unwrap();
        let f_bar = GridFunction::from_fn(&g, |x| 6.0 * x * (1.0 - x)).unwrap();
        let gen = Generator::new(OperatorRep::zeros(&g), f_bar.clone(), NoiseModel::Pool(vec![GridFunction::zeros(&g)])).unwrap();
        let panel = simulate_far(&gen, 11, 20, &mut stream_rng(1, &[])).unwrap();
        assert_eq!(panel.len(), 11);
        for f in &panel {
            assert!(f.max_abs_diff(&f_bar.scale(1.0 / f_bar.integral())).unwrap() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let gen = SyntheticDesign::default().generator().unwrap();
        let a = simulate_far(&gen, 20, 50, &mut stream_rng(3, &[])).unwrap();
        let b = simulate_far(&gen, 20, 50, &mut stream_rng(3, &[])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn scalar_reduction_has_the_right_autocorrelation() {
        let g = make_grid(0.0, 1.0, 33).unwrap();
        let phi = project_zero_integral(&GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x).cos()).unwrap());
        let phi = phi.scale(1.0 / phi.norm());
        let a = outer(&phi, &phi).unwrap().scale(0.8);
        let f_bar = GridFunction::constant(&g, 1.0);
        let gen = Generator::new(a, f_bar, NoiseModel::Gaussian(vec![phi.scale(0.05)])).unwrap();
        let states = gen.simulate_states(2000, 100, &mut stream_rng(11, &[])).unwrap();
        let z: Vec<f64> = states.iter().map(|w| inner(w, &phi).unwrap()).collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let num: f64 = z.windows(2).map(|p| (p[0] - m) * (p[1] - m)).sum();
        let den: f64 = z.iter().map(|v| (v - m).powi(2)).sum();
        assert!((num / den - 0.8).abs() < 0.1, "{}", num / den);

        // No trend in the variance across windows.
        let var = |s: &[f64]| {
            let mu = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (s.len() - 1) as f64
        };
        let (v1, v2) = (var(&z[1000..2000]), var(&z[500..1000]));
        // Standard error of a variance estimate from an AR(1) with rho = 0.8.
        let se = v1 * (2.0f64 * (1.0 + 0.64) / (1.0 - 0.64) / 500.0).sqrt();
        assert!((v1 - v2).abs() < 3.0 * se);
    }

    #[test]
    fn explosive_generators_are_detected() {
        let g = make_grid(0.0, 1.0, 33).unwrap();
        let f_bar = GridFunction::constant(&g, 1.0);
        let phi = project_zero_integral(&GridFunction::from_fn(&g, |x| x).unwrap());
        let phi = phi.scale(1.0 / phi.norm());
        let gen =
            Generator::new(outer(&phi, &phi).unwrap().scale(1.5), f_bar, NoiseModel::Gaussian(vec![phi.scale(0.1)])).unwrap();
        let err = gen.simulate_states(10, 990, &mut stream_rng(1, &[])).unwrap_err();
        assert!(matches!(err, Error::UnstableGenerator { .. }));
    }

    #[test]
    fn gaussian_noise_has_the_requested_covariance() {
        let design = SyntheticDesign::default();
        let sigma = design.noise_covariance().unwrap();
        let noise = NoiseModel::gaussian(&sigma).unwrap();
        let grid = design.grid().unwrap();
        let u = &design.directions().unwrap()[1];
        let mut rng = stream_rng(2, &[]);
        let draws: Vec<f64> = (0..4000).map(|_| inner(&noise.draw(&grid, &mut rng), u).unwrap()).collect();
        let var = draws.iter().map(|d| d * d).sum::<f64>() / draws.len() as f64;
        assert!((var.sqrt() - 0.05).abs() < 0.003, "{}", var.sqrt());
    }

    #[test]
    fn design_directions_are_orthonormal() {
        let d = SyntheticDesign::default();
        let dirs = d.directions().unwrap();
        for (i, u) in dirs.iter().enumerate() {
            assert!(u.integral().abs() < 1e-12);
            for (j, v) in dirs.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((inner(u, v).unwrap() - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn smoke_study() {
        let config = StudyConfig {
            t_values: vec![50],
            n_values: vec![100],
            iterations: 1,
            generator: GeneratorSpec::default(),
            seed: 4,
            burn_in: Some(100),
            k: KChoice::Fixed { k: 2 },
        };
        let r = run_study(&config).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].stats.len(), 18);
        assert!(r.cells[0].stats.iter().all(|s| s.mean.is_finite() && s.mean >= 0.0));
        assert_eq!(r, run_study(&config).unwrap());
    }

    #[test]
    fn study_config_validation() {
        let mut config = StudyConfig {
            t_values: vec![50],
            n_values: vec![100],
            iterations: 0,
            generator: GeneratorSpec::default(),
            seed: 0,
            burn_in: None,
            k: KChoice::default(),
        };
        assert!(run_study(&config).is_err());
        config.iterations = 1;
        config.n_values = vec![5];
        assert!(run_study(&config).is_err());
    }

    #[test]
    fn study_config_parses_from_toml_and_json() {
        let toml_text = r#"
            t_values = [50, 100]
            n_values = [100]
            iterations = 10
            seed = 42

            [generator]
            kind = "synthetic"
            persistence = [0.5]
            noise_sd = [0.03]

            [k]
            mode = "fixed"
            k = 2
        "#;
        let c: StudyConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(c.k, KChoice::Fixed { k: 2 });
        match &c.generator {
            GeneratorSpec::Synthetic(d) => assert_eq!(d.grid_n, 128),
            other => panic!("{other:?}"),
        }
        let json = serde_json::to_string(&c).unwrap();
        let back: StudyConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
