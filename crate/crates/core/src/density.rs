//! Kernel density estimation of per-period observation blocks.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_space::{GridFunction, GridSpec};

/// Epanechnikov rule-of-thumb constant.
pub const EPANECHNIKOV_CONSTANT: f64 = 2.3449;
/// Normal-kernel rule-of-thumb constant.
pub const NORMAL_CONSTANT: f64 = 1.06;

/// Normal-kernel contributions beyond this many bandwidths are below double precision.
const NORMAL_CUTOFF: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
    Normal,
}

impl Kernel {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            Kernel::Normal => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    fn radius(self) -> f64 {
        match self {
            Kernel::Epanechnikov => 1.0,
            Kernel::Normal => NORMAL_CUTOFF,
        }
    }

    fn constant(self) -> f64 {
        match self {
            Kernel::Epanechnikov => EPANECHNIKOV_CONSTANT,
            Kernel::Normal => NORMAL_CONSTANT,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Epanechnikov => "epanechnikov",
            Kernel::Normal => "normal",
        })
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" | "epa" => Ok(Kernel::Epanechnikov),
            "normal" | "gaussian" => Ok(Kernel::Normal),
            other => Err(Error::invalid(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Orders period labels with embedded numbers compared by value, so that
/// `"9" < "10"` and `"2015-2" < "2015-10"`.
pub fn compare_labels(a: &str, b: &str) -> Ordering {
    let (mut x, mut y) = (a, b);
    loop {
        match (x.is_empty(), y.is_empty()) {
            (true, true) => return a.cmp(b),
            (true, false) => return Ordering::Less,
            (false, true) => return Ordering::Greater,
            _ => {}
        }
        let dx = x.chars().next().is_some_and(|c| c.is_ascii_digit());
        let dy = y.chars().next().is_some_and(|c| c.is_ascii_digit());
        let (cx, rx) = split_run(x, dx);
        let (cy, ry) = split_run(y, dy);
        let ord = if dx && dy {
            let tx = cx.trim_start_matches('0');
            let ty = cy.trim_start_matches('0');
            tx.len().cmp(&ty.len()).then_with(|| tx.cmp(ty))
        } else {
            cx.cmp(cy)
        };
        if ord != Ordering::Equal {
            return ord;
        }
        x = rx;
        y = ry;
    }
}

fn split_run(s: &str, digits: bool) -> (&str, &str) {
    let end = s.find(|c: char| c.is_ascii_digit() != digits).unwrap_or(s.len());
    s.split_at(end)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodBlock {
    pub label: String,
    pub values: Vec<f64>,
}

/// Observations grouped by period, in period order.
#[derive(Debug, Clone)]
pub struct RawPanel {
    blocks: Vec<PeriodBlock>,
}

impl RawPanel {
    pub fn new(blocks: Vec<PeriodBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyPanel);
        }
        for block in &blocks {
            if block.values.is_empty() {
                return Err(Error::TooFewObservations { needed: 1, got: 0 }.in_period(&block.label));
            }
            if let Some(index) = block.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index }.in_period(&block.label));
            }
        }
        for pair in blocks.windows(2) {
            if compare_labels(&pair[0].label, &pair[1].label) != Ordering::Less {
                return Err(Error::invalid(format!("periods out of order: `{}` then `{}`", pair[0].label, pair[1].label)));
            }
        }
        Ok(Self { blocks })
    }

    /// Groups `(label, value)` pairs by label and orders the groups. Values
    /// keep their input order within a period.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut blocks: Vec<PeriodBlock> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (label, value) in pairs {
            let slot = *index.entry(label.clone()).or_insert_with(|| {
                blocks.push(PeriodBlock { label, values: Vec::new() });
                blocks.len() - 1
            });
            blocks[slot].values.push(value);
        }
        blocks.sort_by(|x, y| compare_labels(&x.label, &y.label));
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[PeriodBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.values.len()).collect()
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }
}

/// A time series of estimated densities on one grid.
#[derive(Debug, Clone)]
pub struct DensityPanel {
    grid: Arc<GridSpec>,
    densities: Vec<GridFunction>,
    labels: Vec<String>,
}

impl DensityPanel {
    pub fn new(grid: Arc<GridSpec>, densities: Vec<GridFunction>, labels: Vec<String>) -> Result<Self> {
        if densities.len() != labels.len() {
            return Err(Error::invalid("one label is required per density"));
        }
        for (f, label) in densities.iter().zip(&labels) {
            if !f.grid().same_as(&grid) {
                return Err(Error::GridMismatch.in_period(label));
            }
            crate::function_space::check_density(f).map_err(|e| e.in_period(label))?;
            let mass = f.integral();
            if (mass - 1.0).abs() > 1e-8 {
                return Err(Error::DegenerateDensity(format!("integrates to {mass}")).in_period(label));
            }
        }
        Ok(Self { grid, densities, labels })
    }

    /// Labels the densities `1..=T`.
    pub fn unlabeled(grid: Arc<GridSpec>, densities: Vec<GridFunction>) -> Result<Self> {
        let labels = (1..=densities.len()).map(|t| t.to_string()).collect();
        Self::new(grid, densities, labels)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn densities(&self) -> &[GridFunction] {
        &self.densities
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    /// The first `t` periods.
    pub fn prefix(&self, t: usize) -> DensityPanel {
        let t = t.min(self.len());
        DensityPanel { grid: self.grid.clone(), densities: self.densities[..t].to_vec(), labels: self.labels[..t].to_vec() }
    }

    pub fn push(&mut self, label: String, density: GridFunction) -> Result<()> {
        if !density.grid().same_as(&self.grid) {
            return Err(Error::GridMismatch);
        }
        self.densities.push(density);
        self.labels.push(label);
        Ok(())
    }
}

/// Unbiased sample standard deviation.
pub fn sample_std(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1) as f64).sqrt())
}

/// Rule-of-thumb bandwidth `c · σ̂ · n^{-1/5}`.
pub fn bandwidth(sigma_hat: f64, n: usize, kernel: Kernel) -> Result<f64> {
    if n < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: n });
    }
    if !(sigma_hat > 0.0) || !sigma_hat.is_finite() {
        return Err(Error::DegenerateSample(format!("standard deviation {sigma_hat}")));
    }
    Ok(kernel.constant() * sigma_hat * (n as f64).powf(-0.2))
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Support covering `coverage` of the pooled observations, widened by one
/// Epanechnikov bandwidth on each side.
///
/// The widening bandwidth uses the pooled standard deviation and the median
/// period size.
pub fn select_support(panel: &RawPanel, coverage: f64) -> Result<(f64, f64)> {
    if !(coverage > 0.5 && coverage < 1.0) {
        return Err(Error::invalid(format!("coverage must lie in (0.5, 1), got {coverage}")));
    }
    let mut pooled = panel.pooled();
    if pooled.len() < 100 {
        return Err(Error::TooFewObservations { needed: 100, got: pooled.len() });
    }
    let sigma = sample_std(&pooled)?;
    if sigma == 0.0 {
        return Err(Error::DegenerateSample("pooled observations have zero variance".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let tail = (1.0 - coverage) / 2.0;
    let lo = sorted_quantile(&pooled, tail);
    let hi = sorted_quantile(&pooled, 1.0 - tail);

    let mut counts = panel.counts();
    counts.sort_unstable();
    let typical = counts[counts.len() / 2].max(2);
    let h = bandwidth(sigma, typical, Kernel::Epanechnikov)?;
    Ok((lo - h, hi + h))
}

/// Kernel density estimate on `grid`, renormalized to unit mass over the support.
pub fn kde(observations: &[f64], grid: &Arc<GridSpec>, kernel: Kernel, h: f64) -> Result<GridFunction> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::BandwidthNonpositive(h));
    }
    if observations.len() < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: observations.len() });
    }
    let mut sorted = observations.to_vec();
    sorted.sort_by(f64::total_cmp);
    // TODO: bin observations onto the grid before smoothing when the normal
    // kernel's wide reach makes this loop dominate large study runs.
    let reach = kernel.radius() * h;
    let scale = 1.0 / (sorted.len() as f64 * h);
    let values: Vec<f64> = grid
        .points()
        .iter()
        .map(|&x| {
            let start = sorted.partition_point(|&v| v < x - reach);
            let end = sorted.partition_point(|&v| v <= x + reach);
            scale * sorted[start..end].iter().map(|&v| kernel.eval((x - v) / h)).sum::<f64>()
        })
        .collect();
    let f = GridFunction::new(grid.clone(), values)?;
    let mass = f.integral();
    if !(mass > 0.0) {
        return Err(Error::DegenerateDensity("no kernel mass falls on the support".into()));
    }
    Ok(f.scale(1.0 / mass))
}

/// Estimates one density per period with its own rule-of-thumb bandwidth.
pub fn estimate_panel(panel: &RawPanel, grid: &Arc<GridSpec>, kernel: Kernel) -> Result<DensityPanel> {
    let densities = panel
        .blocks()
        .par_iter()
        .map(|block| {
            let estimate = || {
                let sigma = sample_std(&block.values)?;
                let h = bandwidth(sigma, block.values.len(), kernel)?;
                kde(&block.values, grid, kernel, h)
            };
            estimate().map_err(|e| e.in_period(&block.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = panel.blocks().iter().map(|b| b.label.clone()).collect();
    DensityPanel::new(grid.clone(), densities, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::make_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_draws(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn label_ordering_is_numeric_aware() {
        assert_eq!(compare_labels("9", "10"), Ordering::Less);
        assert_eq!(compare_labels("2015-2", "2015-10"), Ordering::Less);
        assert_eq!(compare_labels("a", "b"), Ordering::Less);
        assert_eq!(compare_labels("m007", "m7"), Ordering::Less);
        assert_eq!(compare_labels("x", "x"), Ordering::Equal);
    }

    #[test]
    fn bandwidth_rules() {
        let h = bandwidth(1.0, 1024, Kernel::Epanechnikov).unwrap();
        assert!((h - 2.3449 / 4.0).abs() < 1e-12);
        assert!((bandwidth(2.0, 32, Kernel::Epanechnikov).unwrap() - 2.3449).abs() < 1e-12);
        assert!((bandwidth(1.0, 32, Kernel::Normal).unwrap() - 0.53).abs() < 1e-12);
        assert!(bandwidth(1.0, 1, Kernel::Normal).is_err());
        assert!(matches!(bandwidth(0.0, 10, Kernel::Normal), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn support_of_three_point_sample() {
        let pairs = (0..100).flat_map(|i| [-1.0, 0.0, 1.0].map(|v| ((i % 4).to_string(), v)));
        let panel = RawPanel::from_pairs(pairs).unwrap();
        let (a, b) = select_support(&panel, 0.999).unwrap();
        assert!(a <= -1.0 && b >= 1.0);
        assert!(select_support(&panel, 1.2).is_err());
    }

    #[test]
    fn support_of_normal_sample() {
        let draws = normal_draws(100_000, 1);
        let pairs = draws.iter().enumerate().map(|(i, &v)| ((i / 1000).to_string(), v));
        let panel = RawPanel::from_pairs(pairs).unwrap();
        let (a, b) = select_support(&panel, 0.999).unwrap();
        assert!(a <= -3.29 && b >= 3.29, "({a}, {b})");
        assert!(a >= -4.5 && b <= 4.5, "({a}, {b})");
    }

    #[test]
    fn support_rejects_small_or_constant_samples() {
        let small = RawPanel::from_pairs((0..50).map(|i| ("1".to_string(), i as f64))).unwrap();
        assert!(matches!(select_support(&small, 0.99), Err(Error::TooFewObservations { .. })));
        let flat = RawPanel::from_pairs((0..200).map(|_| ("1".to_string(), 3.0))).unwrap();
        assert!(matches!(select_support(&flat, 0.99), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn kde_spike_is_symmetric() {
        let g = make_grid(-1.0, 1.0, 201).unwrap();
        let f = kde(&[0.0; 20], &g, Kernel::Epanechnikov, 0.2).unwrap();
        assert!((f.integral() - 1.0).abs() < 1e-12);
        let v = f.values();
        for i in 0..v.len() {
            assert!((v[i] - v[v.len() - 1 - i]).abs() < 1e-12);
        }
        assert_eq!(v.iter().cloned().fold(f64::MIN, f64::max), v[100]);
    }

    #[test]
    fn kde_errors() {
        let g = make_grid(-1.0, 1.0, 32).unwrap();
        assert!(matches!(kde(&[0.0, 1.0], &g, Kernel::Normal, 0.0), Err(Error::BandwidthNonpositive(_))));
        assert!(matches!(kde(&[0.0], &g, Kernel::Normal, 0.1), Err(Error::TooFewObservations { .. })));
    }

    #[test]
    fn kde_recovers_standard_normal() {
        let g = make_grid(-4.0, 4.0, 401).unwrap();
        let draws = normal_draws(20_000, 7);
        let h = bandwidth(sample_std(&draws).unwrap(), draws.len(), Kernel::Normal).unwrap();
        let f = kde(&draws, &g, Kernel::Normal, h).unwrap();
        let sup = g
            .points()
            .iter()
            .zip(f.values())
            .map(|(x, v)| (v - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.02, "sup error {sup}");
    }

    #[test]
    fn kde_integrates_to_one() {
        let g = make_grid(-3.0, 3.0, 64).unwrap();
        for seed in 0..5 {
            let draws = normal_draws(300, seed);
            for kernel in [Kernel::Epanechnikov, Kernel::Normal] {
                let f = kde(&draws, &g, kernel, 0.3).unwrap();
                assert!((f.integral() - 1.0).abs() < 1e-12);
                assert!(f.values().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn kde_error_shrinks_with_sample_size() {
        let g = make_grid(-4.0, 4.0, 161).unwrap();
        let truth = GridFunction::from_fn(&g, |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).unwrap();
        let mise = |n: usize| {
            let mut errs: Vec<f64> = (0..20)
                .map(|rep| {
                    let draws = normal_draws(n, 1000 + rep);
                    let h = bandwidth(sample_std(&draws).unwrap(), n, Kernel::Epanechnikov).unwrap();
                    let f = kde(&draws, &g, Kernel::Epanechnikov, h).unwrap();
                    f.sub(&truth).unwrap().norm().powi(2)
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[10]
        };
        let (e1, e2, e3) = (mise(250), mise(1000), mise(4000));
        assert!(e1 > e2 && e2 > e3, "{e1} {e2} {e3}");
    }

    #[test]
    fn kde_scale_equivariance() {
        let c = 0.0031;
        let g1 = make_grid(-4.0, 4.0, 128).unwrap();
        let gc = make_grid(-4.0 * c, 4.0 * c, 128).unwrap();
        let draws = normal_draws(500, 9);
        let scaled: Vec<f64> = draws.iter().map(|v| v * c).collect();
        let panel1 = RawPanel::from_pairs(draws.iter().map(|&v| ("1".to_string(), v))).unwrap();
        let panelc = RawPanel::from_pairs(scaled.iter().map(|&v| ("1".to_string(), v))).unwrap();
        let h1 = bandwidth(sample_std(&draws).unwrap(), 500, Kernel::Epanechnikov).unwrap();
        let hc = bandwidth(sample_std(&scaled).unwrap(), 500, Kernel::Epanechnikov).unwrap();
        assert!((hc - c * h1).abs() <= 1e-10 * hc);
        let f1 = estimate_panel(&panel1, &g1, Kernel::Epanechnikov).unwrap().densities()[0].clone();
        let fc = estimate_panel(&panelc, &gc, Kernel::Epanechnikov).unwrap().densities()[0].clone();
        for (a, b) in f1.values().iter().zip(fc.values()) {
            assert!((a / c - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn panel_estimation() {
        let g = make_grid(-4.0, 4.0, 64).unwrap();
        let block = normal_draws(300, 4);
        let pairs = ["a", "b", "c"].iter().flat_map(|l| block.iter().map(move |&v| (l.to_string(), v)));
        let panel = RawPanel::from_pairs(pairs).unwrap();
        let dp = estimate_panel(&panel, &g, Kernel::Epanechnikov).unwrap();
        assert_eq!(dp.labels(), &["a", "b", "c"]);
        assert_eq!(dp.densities()[0].values(), dp.densities()[2].values());

        let single = RawPanel::from_pairs(block.iter().map(|&v| ("only".to_string(), v))).unwrap();
        assert_eq!(estimate_panel(&single, &g, Kernel::Normal).unwrap().len(), 1);

        let bad = RawPanel::from_pairs(vec![("x".to_string(), 1.0), ("y".to_string(), 0.0), ("y".to_string(), 1.0)]).unwrap();
        match estimate_panel(&bad, &g, Kernel::Normal) {
            Err(Error::Period { label, .. }) => assert_eq!(label, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raw_panel_validation() {
        assert!(matches!(RawPanel::new(vec![]), Err(Error::EmptyPanel)));
        let out_of_order =
            vec![PeriodBlock { label: "2".into(), values: vec![1.0] }, PeriodBlock { label: "1".into(), values: vec![1.0] }];
        assert!(RawPanel::new(out_of_order).is_err());
        let sorted = RawPanel::from_pairs(vec![("10".into(), 1.0), ("9".into(), 2.0), ("10".into(), 3.0)]).unwrap();
        assert_eq!(sorted.blocks()[0].label, "9");
        assert_eq!(sorted.blocks()[1].values, vec![1.0, 3.0]);
    }
}
