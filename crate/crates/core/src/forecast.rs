//! Density forecasts, K selection, error measures and rolling backtests.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::density::DensityPanel;
use crate::error::{Error, Result};
use crate::far::{mean_density, FarModel, FarMoments};
use crate::function_space::{apply_operator, cdf_from_density, check_density, inner, project_zero_integral, GridFunction};

/// Clipped forecasts with less mass than this are rejected.
pub const MIN_FORECAST_MASS: f64 = 1e-12;

/// Default number of validation periods used when selecting `K`.
pub const DEFAULT_VALIDATION_PERIODS: usize = 5;

/// One step of the recursion, `ŵ_{T+1} = Â ŵ_T`.
pub fn forecast_one_step(model: &FarModel, w_t: &GridFunction) -> Result<GridFunction> {
    Ok(project_zero_integral(&apply_operator(model.operator(), w_t)?))
}

/// The first `h` iterates of the recursion, on the demeaned scale.
pub fn forecast_h_steps(model: &FarModel, w_t: &GridFunction, h: usize) -> Result<Vec<GridFunction>> {
    if h == 0 {
        return Err(Error::invalid("forecast horizon must be at least 1"));
    }
    let mut out = Vec::with_capacity(h);
    let mut w = w_t.clone();
    for _ in 0..h {
        w = forecast_one_step(model, &w)?;
        out.push(w.clone());
    }
    Ok(out)
}

/// Turns a demeaned forecast into a density: clip `f̄ + ŵ` at zero and
/// rescale to unit mass.
pub fn to_density(w: &GridFunction, f_bar: &GridFunction) -> Result<GridFunction> {
    let clipped = f_bar.add(w)?.map(|v| v.max(0.0));
    let mass = clipped.integral();
    if !(mass > MIN_FORECAST_MASS) {
        return Err(Error::DegenerateForecast { mass });
    }
    Ok(clipped.scale(1.0 / mass))
}

#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub horizon: usize,
    pub w_forecast: GridFunction,
    pub f_forecast: GridFunction,
}

/// Forecasts `h` periods past `w_t`, keeping both scales for each horizon.
pub fn forecast(model: &FarModel, w_t: &GridFunction, h: usize) -> Result<Vec<ForecastResult>> {
    forecast_h_steps(model, w_t, h)?
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let f = to_density(&w, model.mean())?;
            Ok(ForecastResult { horizon: i + 1, w_forecast: w, f_forecast: f })
        })
        .collect()
}

/// `Φ⁻¹(1 − α/2)`.
pub fn normal_critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let std = Normal::standard();
    Ok(std.inverse_cdf(1.0 - alpha / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureInterval {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
    pub half_width: f64,
}

/// Asymptotic interval for `⟨v, w_{T+1}⟩` with half-width
/// `z · sqrt((1 + K/T) ⟨v, Σ̂ v⟩)`.
pub fn feature_interval(model: &FarModel, v: &GridFunction, w_forecast: &GridFunction, alpha: f64) -> Result<FeatureInterval> {
    let z = normal_critical_value(alpha)?;
    let sigma = model.noise_covariance().symmetrized();
    let sv = apply_operator(&sigma, v)?;
    let var = inner(v, &sv)?;
    let scale = sigma.hs_norm() * v.norm().powi(2);
    if var < -1e-10 * scale {
        return Err(Error::ZeroVariance { variance: var });
    }
    let var = var.max(0.0);
    let center = inner(v, w_forecast)?;
    let inflation = 1.0 + model.k() as f64 / model.sample_size() as f64;
    let half_width = z * (inflation * var).sqrt();
    Ok(FeatureInterval { center, lower: center - half_width, upper: center + half_width, half_width })
}

/// The historical mean density.
pub fn predictor_ave(panel: &DensityPanel) -> Result<GridFunction> {
    mean_density(panel.densities())
}

/// The most recent density.
pub fn predictor_last(panel: &DensityPanel) -> Result<GridFunction> {
    panel.densities().last().cloned().ok_or(Error::EmptyPanel)
}

/// The six deviation measures between a forecast and the realized density.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub d2: f64,
    pub d1: f64,
    pub dks: f64,
    pub dcm: f64,
    pub dm: f64,
    pub dv: f64,
}

impl ErrorReport {
    pub const NAMES: [&'static str; 6] = ["D2", "D1", "Dks", "Dcm", "Dm", "Dv"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.d2, self.d1, self.dks, self.dcm, self.dm, self.dv]
    }
}

fn mean_and_variance(f: &GridFunction) -> (f64, f64) {
    let grid = f.grid();
    let w = grid.weights();
    let x = grid.points();
    let v = f.values();
    let m: f64 = (0..x.len()).map(|i| w[i] * x[i] * v[i]).sum();
    let var: f64 = (0..x.len()).map(|i| w[i] * (x[i] - m).powi(2) * v[i]).sum();
    (m, var)
}

pub fn error_metrics(f_hat: &GridFunction, f_true: &GridFunction) -> Result<ErrorReport> {
    if !f_hat.grid().same_as(f_true.grid()) {
        return Err(Error::GridMismatch);
    }
    check_density(f_hat)?;
    check_density(f_true)?;
    let diff = f_hat.sub(f_true)?;
    let d2 = diff.norm();
    let d1 = diff.map(f64::abs).integral();

    let cdf_hat = cdf_from_density(f_hat)?;
    let cdf_true = cdf_from_density(f_true)?;
    let cdf_diff = cdf_hat.sub(&cdf_true)?;
    let dks = cdf_diff.max_abs();
    let w = f_true.grid().weights();
    let dcm: f64 = cdf_diff.values().iter().zip(f_true.values()).zip(w).map(|((d, f), w)| w * d * d * f.max(0.0)).sum();

    let (m_hat, v_hat) = mean_and_variance(f_hat);
    let (m_true, v_true) = mean_and_variance(f_true);
    Ok(ErrorReport { d2, d1, dks, dcm, dm: (m_hat - m_true).abs(), dv: (v_hat - v_true).abs() })
}

fn validate_candidates(candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::invalid("K candidates must be nonempty and at least 1"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted)
}

fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::RankDeficient { .. } | Error::DegenerateForecast { .. })
}

/// Cross-validation score of every candidate; `None` marks a candidate that
/// failed in some validation period.
pub fn cv_scores(densities: &[GridFunction], candidates: &[usize], n_validation: usize) -> Result<Vec<(usize, Option<f64>)>> {
    let candidates = validate_candidates(candidates)?;
    let t = densities.len();
    if n_validation == 0 {
        return Err(Error::invalid("at least one validation period is required"));
    }
    if t <= n_validation + 5 {
        return Err(Error::TooFewPeriods { needed: n_validation + 6, got: t });
    }
    // One row per validation period, one entry per candidate.
    let per_period: Vec<Vec<Option<f64>>> = (t - n_validation..t)
        .into_par_iter()
        .map(|s| {
            let moments = FarMoments::new(&densities[..s])?;
            let last = &moments.states()[s - 1];
            candidates
                .iter()
                .map(|&k| {
                    let scored = moments.fit(k).and_then(|m| {
                        let f = to_density(&forecast_one_step(&m, last)?, m.mean())?;
                        Ok(f.sub(&densities[s])?.norm())
                    });
                    match scored {
                        Ok(d2) => Ok(Some(d2)),
                        Err(e) if is_skippable(&e) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    Ok(candidates
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let scores: Option<Vec<f64>> = per_period.iter().map(|row| row[j]).collect();
            (k, scores.map(|s| s.iter().sum::<f64>() / s.len() as f64))
        })
        .collect())
}

/// Picks `K` by rolling one-step cross-validation over the last
/// `n_validation` periods, scoring with mean `D2`.
pub fn select_k_cv(densities: &[GridFunction], candidates: &[usize], n_validation: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, score) in cv_scores(densities, candidates, n_validation)? {
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((k, s));
            }
        }
    }
    best.map(|(k, _)| k).ok_or(Error::NoFeasibleK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Predictor {
    Far,
    Ave,
    Last,
}

impl Predictor {
    pub const ALL: [Predictor; 3] = [Predictor::Far, Predictor::Ave, Predictor::Last];
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predictor::Far => "FAR",
            Predictor::Ave => "AVE",
            Predictor::Last => "LAST",
        })
    }
}

/// Mean, median and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std_error: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: f64::NAN, median: f64::NAN, std_error: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let std_error = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, median, std_error }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub predictor: Predictor,
    pub measure: String,
    pub mean: f64,
    pub median: f64,
}

/// Scores of one test period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestPeriod {
    pub label: String,
    pub k: usize,
    pub far: ErrorReport,
    pub ave: ErrorReport,
    pub last: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub periods: Vec<BacktestPeriod>,
    pub rows: Vec<BacktestRow>,
}

impl BacktestReport {
    pub fn row(&self, predictor: Predictor, measure: &str) -> Option<&BacktestRow> {
        self.rows.iter().find(|r| r.predictor == predictor && r.measure == measure)
    }
}

/// Aggregates per-predictor error reports into mean/median rows, in
/// `Predictor::ALL` × `ErrorReport::NAMES` order.
pub fn aggregate_errors(reports: &[(Predictor, Vec<ErrorReport>)]) -> Vec<BacktestRow> {
    let mut rows = Vec::new();
    for (predictor, errs) in reports {
        for (j, name) in ErrorReport::NAMES.iter().enumerate() {
            let vals: Vec<f64> = errs.iter().map(|e| e.as_array()[j]).collect();
            let s = summarize(&vals);
            rows.push(BacktestRow { predictor: *predictor, measure: name.to_string(), mean: s.mean, median: s.median });
        }
    }
    rows
}

/// Rolling out-of-sample evaluation over the last `n_test` periods. Each
/// period reselects `K` on the data before it.
pub fn rolling_backtest(
    panel: &DensityPanel,
    n_test: usize,
    candidates: &[usize],
    n_validation: usize,
) -> Result<BacktestReport> {
    if n_test == 0 {
        return Err(Error::invalid("n_test must be at least 1"));
    }
    validate_candidates(candidates)?;
    let t = panel.len();
    let needed = n_test + n_validation + 11;
    if t < needed {
        return Err(Error::TooFewPeriods { needed, got: t });
    }
    let densities = panel.densities();
    let labels = panel.labels();
    let periods: Vec<BacktestPeriod> = (t - n_test..t)
        .into_par_iter()
        .map(|s| {
            let history = &densities[..s];
            let truth = &densities[s];
            let run = || -> Result<BacktestPeriod> {
                let k = select_k_cv(history, candidates, n_validation)?;
                let moments = FarMoments::new(history)?;
                let model = moments.fit(k)?;
                let w = forecast_one_step(&model, &moments.states()[s - 1])?;
                let far = to_density(&w, model.mean())?;
                let ave = mean_density(history)?;
                let last = &history[s - 1];
                Ok(BacktestPeriod {
                    label: labels[s].clone(),
                    k,
                    far: error_metrics(&far, truth)?,
                    ave: error_metrics(&ave, truth)?,
                    last: error_metrics(last, truth)?,
                })
            };
            run().map_err(|e| e.in_period(&labels[s]))
        })
        .collect::<Result<_>>()?;

    let rows = aggregate_errors(&[
        (Predictor::Far, periods.iter().map(|p| p.far).collect()),
        (Predictor::Ave, periods.iter().map(|p| p.ave).collect()),
        (Predictor::Last, periods.iter().map(|p| p.last).collect()),
    ]);
    Ok(BacktestReport { periods, rows })
}
