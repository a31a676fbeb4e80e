//! Residual bootstrap bands for statistics of a fitted model.
//!
//! Each replication regenerates the demeaned panel recursively from the
//! observed first state with resampled centered residuals, refits with the
//! same `K`, and evaluates the statistic. Bands are pointwise percentiles.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::sorted_quantile;
use crate::error::{Error, Result};
use crate::far::{mean_density, FarModel, FarMoments};
use crate::function_space::{apply_operator, GridFunction};
use crate::simulation::{stream_rng, NoiseModel};

pub const MIN_REPLICATIONS: usize = 100;
pub const MIN_RESIDUALS: usize = 10;
/// Largest share of replications allowed to fail.
pub const MAX_DROPPED_PCT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub name: String,
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub replications: usize,
    pub dropped: usize,
    pub seed: u64,
}

/// One bootstrap panel of demeaned states, `T` long, starting at `ŵ_1`.
pub fn regenerate_states<R: Rng + ?Sized>(model: &FarModel, pool: &[GridFunction], rng: &mut R) -> Result<Vec<GridFunction>> {
    let t = model.sample_size();
    let mut states = Vec::with_capacity(t);
    states.push(model.first_state().clone());
    for _ in 1..t {
        let prev = states.last().expect("nonempty");
        let eps = &pool[rng.random_range(0..pool.len())];
        states.push(apply_operator(model.operator(), prev)?.add(eps)?);
    }
    Ok(states)
}

/// Refits on a regenerated panel after removing its own sample mean.
fn refit(model: &FarModel, states: Vec<GridFunction>) -> Result<FarModel> {
    let center = mean_density(&states)?;
    let demeaned = states.iter().map(|w| w.sub(&center)).collect::<Result<Vec<_>>>()?;
    FarMoments::from_states(model.mean().clone(), demeaned)?.fit(model.k())
}

/// Percentile bands for `statistic` at level `1 − alpha`.
pub fn residual_bootstrap<F>(
    model: &FarModel,
    name: &str,
    statistic: F,
    replications: usize,
    alpha: f64,
    seed: u64,
) -> Result<BandResult>
where
    F: Fn(&FarModel) -> Result<Vec<f64>> + Sync,
{
    if replications < MIN_REPLICATIONS {
        return Err(Error::invalid(format!("need at least {MIN_REPLICATIONS} replications, got {replications}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if model.residuals().len() < MIN_RESIDUALS {
        return Err(Error::TooFewResiduals { needed: MIN_RESIDUALS, got: model.residuals().len() });
    }
    let point = statistic(model)?;
    let NoiseModel::Pool(pool) = NoiseModel::residual_pool(model.residuals())? else {
        unreachable!("residual_pool builds a pool")
    };

    let draws: Vec<Option<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, &[b as u64]);
            let value = regenerate_states(model, &pool, &mut rng).and_then(|s| refit(model, s)).and_then(|m| statistic(&m));
            match value {
                Ok(v) if v.len() == point.len() && v.iter().all(|x| x.is_finite()) => Some(v),
                _ => None,
            }
        })
        .collect();
    let kept: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let dropped = replications - kept.len();
    if dropped as f64 > MAX_DROPPED_PCT / 100.0 * replications as f64 {
        return Err(Error::TooManyDropped { dropped, total: replications, limit_pct: MAX_DROPPED_PCT });
    }

    let mut lower = Vec::with_capacity(point.len());
    let mut upper = Vec::with_capacity(point.len());
    let mut column = vec![0.0; kept.len()];
    for j in 0..point.len() {
        for (c, row) in column.iter_mut().zip(&kept) {
            *c = row[j];
        }
        column.sort_by(f64::total_cmp);
        lower.push(sorted_quantile(&column, alpha / 2.0));
        upper.push(sorted_quantile(&column, 1.0 - alpha / 2.0));
    }
    Ok(BandResult { name: name.to_string(), point, lower, upper, alpha, replications, dropped, seed })
}
