use std::path::{Path, PathBuf};
use std::sync::Arc;

use fdar::analysis::{decompose_model, default_tail_thresholds, impulse_response, leading_features, Functional, TailRegion};
use fdar::bootstrap::{residual_bootstrap, BandResult};
use fdar::density::{estimate_panel, select_support};
use fdar::forecast::{feature_interval, forecast, rolling_backtest, select_k_cv, ErrorReport, Predictor};
use fdar::function_space::{make_grid, project_zero_integral};
use fdar::io::{
    fmt_f64, load_model, read_density, read_observations, save_model, write_csv, write_json, ModelFormat, PipelineConfig,
};
use fdar::simulation::{run_study, sample_density, KChoice, StudyConfig, StudyResult};
use fdar::{DensityPanel, Error, FarModel, FarMoments, GridFunction, GridSpec, RawPanel, Result};
use serde_json::{json, Value};

use crate::args::{
    AnalyzeCommand, BacktestArgs, BootstrapArgs, EstimateArgs, ForecastArgs, GridArgs, KArgs, SampleArgs, SimulateArgs,
};

/// `out.csv` → `out.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(Error::invalid(format!("output directory {} does not exist", dir.display())));
        }
    }
    Ok(())
}

fn ensure_parents(paths: &[&Path]) -> Result<()> {
    paths.iter().try_for_each(|p| ensure_parent(p))
}

fn grid_for(raw: &RawPanel, a: Option<f64>, b: Option<f64>, n: usize, coverage: f64) -> Result<Arc<GridSpec>> {
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) => (a, b),
        _ => select_support(raw, coverage)?,
    };
    make_grid(a, b, n)
}

fn load_panel(input: &Path, grid: &GridArgs) -> Result<(RawPanel, DensityPanel)> {
    let raw = read_observations(input)?;
    let g = grid_for(&raw, grid.a, grid.b, grid.grid_n, grid.coverage)?;
    let panel = estimate_panel(&raw, &g, grid.kernel)?;
    Ok((raw, panel))
}

fn choose_k(densities: &[GridFunction], choice: &KChoice) -> Result<usize> {
    match choice {
        KChoice::Fixed { k } => Ok(*k),
        KChoice::CrossValidation { candidates, n_validation } => select_k_cv(densities, candidates, *n_validation),
    }
}

fn k_choice(args: &KArgs) -> KChoice {
    match (args.k, &args.k_candidates) {
        (Some(k), _) => KChoice::Fixed { k },
        (None, Some(c)) => KChoice::CrossValidation { candidates: c.0.clone(), n_validation: args.n_validation },
        (None, None) => KChoice::CrossValidation { candidates: (1..=8).collect(), n_validation: args.n_validation },
    }
}

fn grid_json(grid: &GridSpec) -> Value {
    json!({ "a": grid.a(), "b": grid.b(), "n": grid.n() })
}

fn scree_rows(model: &FarModel) -> Vec<Vec<String>> {
    let shares = model.explained_variance();
    let mut cumulative = 0.0;
    model
        .eigen()
        .eigenvalues()
        .iter()
        .zip(&shares)
        .enumerate()
        .map(|(k, (l, s))| {
            cumulative += s;
            vec![(k + 1).to_string(), fmt_f64(*l), fmt_f64(*s), fmt_f64(cumulative.min(1.0))]
        })
        .collect()
}

fn write_scree(path: &Path, model: &FarModel) -> Result<()> {
    write_csv(path, &["k", "eigenvalue", "share", "cumulative"], &scree_rows(model))
}

fn write_densities(path: &Path, panel: &DensityPanel) -> Result<()> {
    let mut header = vec!["x".to_string()];
    header.extend(panel.labels().iter().cloned());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = panel
        .grid()
        .points()
        .iter()
        .enumerate()
        .map(|(i, x)| std::iter::once(fmt_f64(*x)).chain(panel.densities().iter().map(|f| fmt_f64(f.values()[i]))).collect())
        .collect();
    write_csv(path, &header, &rows)
}

pub fn estimate(args: EstimateArgs) -> Result<()> {
    let scree = args.scree.clone().unwrap_or_else(|| args.out.with_extension("scree.csv"));
    let mut outputs = vec![args.out.as_path(), scree.as_path()];
    if let Some(d) = &args.densities {
        outputs.push(d);
    }
    ensure_parents(&outputs)?;
    let choice = k_choice(&args.k);
    let (raw, panel) = load_panel(&args.input, &args.grid)?;
    let k = choose_k(panel.densities(), &choice)?;
    let model = FarMoments::new(panel.densities())?.fit(k)?;

    let format = args.format.unwrap_or_else(|| ModelFormat::from_path(&args.out));
    save_model(&model, &args.out, format)?;
    write_scree(&scree, &model)?;
    write_json(
        &sidecar(&scree),
        &json!({
            "input": args.input,
            "kernel": args.grid.kernel,
            "grid": grid_json(model.grid()),
            "periods": raw.len(),
            "first_period": panel.labels().first(),
            "last_period": panel.labels().last(),
            "k": k,
            "k_selection": choice,
            "usable_rank": FarMoments::new(panel.densities())?.usable_rank(),
        }),
    )?;
    if let Some(path) = &args.densities {
        write_densities(path, &panel)?;
    }
    Ok(())
}

pub fn forecast_cmd(args: ForecastArgs) -> Result<()> {
    ensure_parent(&args.out)?;
    let model = load_model(&args.model)?;
    let origin = match &args.input {
        None => model.last_state().clone(),
        Some(path) => {
            let raw = read_observations(path)?;
            let panel = estimate_panel(&raw, model.grid(), args.kernel)?;
            let last = panel.densities().last().ok_or(Error::EmptyPanel)?;
            project_zero_integral(&last.sub(model.mean())?)
        }
    };
    let path = forecast(&model, &origin, args.horizon)?;

    let mut header = vec!["x".to_string()];
    header.extend(path.iter().map(|r| format!("h{}", r.horizon)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = model
        .grid()
        .points()
        .iter()
        .enumerate()
        .map(|(i, x)| std::iter::once(fmt_f64(*x)).chain(path.iter().map(|r| fmt_f64(r.f_forecast.values()[i]))).collect())
        .collect();

    let mut intervals = Vec::new();
    for func in &args.functionals {
        let v = func.build(model.grid())?;
        let iv = feature_interval(&model, &v, &path[0].w_forecast, args.alpha)?;
        // Shift from the demeaned scale to the level of the functional.
        let level = fdar::function_space::inner(&v, model.mean())?;
        intervals.push(json!({
            "functional": func,
            "center": iv.center + level,
            "lower": iv.lower + level,
            "upper": iv.upper + level,
            "demeaned": iv,
        }));
    }
    write_csv(&args.out, &header, &rows)?;
    write_json(
        &sidecar(&args.out),
        &json!({
            "model": args.model,
            "k": model.k(),
            "sample_size": model.sample_size(),
            "grid": grid_json(model.grid()),
            "horizon": args.horizon,
            "origin": if args.input.is_some() { "input" } else { "model" },
            "alpha": args.alpha,
            "intervals": intervals,
        }),
    )
}

fn run_bootstrap<F>(model: &FarModel, name: &str, stat: F, args: &BootstrapArgs) -> Result<Option<BandResult>>
where
    F: Fn(&FarModel) -> Result<Vec<f64>> + Sync,
{
    match args.replications {
        None => Ok(None),
        Some(b) => {
            let seed = args.seed.ok_or_else(|| Error::invalid("--seed is required with --bootstrap"))?;
            residual_bootstrap(model, name, stat, b, args.alpha, seed).map(Some)
        }
    }
}

fn band_meta(band: &Option<BandResult>) -> Value {
    match band {
        None => Value::Null,
        Some(b) => json!({
            "statistic": b.name,
            "replications": b.replications,
            "alpha": b.alpha,
            "seed": b.seed,
            "dropped": b.dropped,
        }),
    }
}

/// Rows `(label, point[, lower, upper])`.
fn band_rows(labels: &[String], point: &[f64], band: &Option<BandResult>) -> Vec<Vec<String>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut row = vec![l.clone(), fmt_f64(point[i])];
            if let Some(b) = band {
                row.push(fmt_f64(b.lower[i]));
                row.push(fmt_f64(b.upper[i]));
            }
            row
        })
        .collect()
}

fn band_header<'a>(first: &'a str, band: &Option<BandResult>) -> Vec<&'a str> {
    let mut h = vec![first, "point"];
    if band.is_some() {
        h.extend(["lower", "upper"]);
    }
    h
}

fn model_meta(path: &Path, model: &FarModel) -> Value {
    json!({
        "model": path,
        "k": model.k(),
        "sample_size": model.sample_size(),
        "grid": grid_json(model.grid()),
    })
}

fn x_labels(model: &FarModel) -> Vec<String> {
    model.grid().points().iter().map(|x| fmt_f64(*x)).collect()
}

fn irf_outputs(model: &FarModel, func: Functional, boot: &BootstrapArgs, out: &Path, meta: Value) -> Result<()> {
    let v = func.build(model.grid())?;
    let point = impulse_response(model.operator(), &v)?.into_values();
    let band = run_bootstrap(model, "impulse_response", |m| Ok(impulse_response(m.operator(), &v)?.into_values()), boot)?;
    write_csv(out, &band_header("x", &band), &band_rows(&x_labels(model), &point, &band))?;
    write_json(&sidecar(out), &json!({ "functional": func, "model": meta, "bootstrap": band_meta(&band) }))
}

fn vardecomp_outputs(
    model: &FarModel,
    func: Functional,
    kmax: usize,
    boot: &BootstrapArgs,
    out: &Path,
    meta: Value,
) -> Result<()> {
    let v = func.build(model.grid())?;
    let report = decompose_model(model, &v, kmax)?;
    // The bootstrap statistic carries the shares followed by R².
    let stat = |m: &FarModel| {
        let r = decompose_model(m, &v, kmax)?;
        let mut out = r.pi;
        out.push(r.r_squared.map_or(f64::NAN, |r| r.value));
        Ok(out)
    };
    let band = run_bootstrap(model, "variance_decomposition", stat, boot)?;
    let labels: Vec<String> = (1..=kmax).map(|k| k.to_string()).collect();
    let pi_band = band.as_ref().map(|b| BandResult {
        point: b.point[..kmax].to_vec(),
        lower: b.lower[..kmax].to_vec(),
        upper: b.upper[..kmax].to_vec(),
        ..b.clone()
    });
    write_csv(out, &band_header("k", &pi_band), &band_rows(&labels, &report.pi, &pi_band))?;
    let r2 = report.r_squared.expect("plug-in decomposition includes R²");
    let r2_band = band.as_ref().map(|b| json!({ "lower": b.lower[kmax], "upper": b.upper[kmax] }));
    write_json(
        &sidecar(out),
        &json!({
            "functional": func,
            "kmax": kmax,
            "variance": report.variance,
            "explained_share": report.pi.iter().sum::<f64>(),
            "r_squared": r2.value,
            "r_squared_raw": r2.raw,
            "r_squared_band": r2_band,
            "residual_share": report.residual_share,
            "model": meta,
            "bootstrap": band_meta(&band),
        }),
    )
}

pub fn analyze(what: AnalyzeCommand) -> Result<()> {
    match what {
        AnalyzeCommand::Features { model, m, out } => {
            ensure_parent(&out)?;
            let fm = load_model(&model)?;
            let f = leading_features(fm.operator(), m)?;
            let mut header = vec!["x".to_string()];
            for k in 1..=m {
                header.push(format!("progressive_{k}"));
                header.push(format!("regressive_{k}"));
            }
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<String>> = fm
                .grid()
                .points()
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut row = vec![fmt_f64(*x)];
                    for k in 0..m {
                        row.push(fmt_f64(f.progressive[k].values()[i]));
                        row.push(fmt_f64(f.regressive[k].values()[i]));
                    }
                    row
                })
                .collect();
            write_csv(&out, &header, &rows)?;
            write_json(&sidecar(&out), &json!({ "strengths": f.strengths, "model": model_meta(&model, &fm) }))
        }
        AnalyzeCommand::Irf { model, functional, bootstrap, out } => {
            ensure_parent(&out)?;
            let fm = load_model(&model)?;
            irf_outputs(&fm, functional, &bootstrap, &out, model_meta(&model, &fm))
        }
        AnalyzeCommand::Vardecomp { model, functional, kmax, bootstrap, out } => {
            ensure_parent(&out)?;
            let fm = load_model(&model)?;
            vardecomp_outputs(&fm, functional, kmax, &bootstrap, &out, model_meta(&model, &fm))
        }
        AnalyzeCommand::Tails { model, lower, upper, kmax, bootstrap, out } => {
            ensure_parent(&out)?;
            let fm = load_model(&model)?;
            let (lo_default, hi_default) = default_tail_thresholds(fm.mean())?;
            let (lo, hi) = (lower.unwrap_or(lo_default), upper.unwrap_or(hi_default));
            let meta = model_meta(&model, &fm);
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("tails").to_string();
            let named = |suffix: &str| out.with_file_name(format!("{stem}_{suffix}.csv"));
            let sides = [("left", TailRegion::Left(lo)), ("right", TailRegion::Right(hi))];
            let mut responses = Vec::new();
            let mut bands = Vec::new();
            for (name, region) in sides {
                let v = fdar::analysis::tail_indicator(fm.grid(), region)?;
                responses.push(impulse_response(fm.operator(), &v)?.into_values());
                bands.push(run_bootstrap(
                    &fm,
                    &format!("{name}_tail_response"),
                    |m| Ok(impulse_response(m.operator(), &v)?.into_values()),
                    &bootstrap,
                )?);
                vardecomp_outputs(
                    &fm,
                    Functional::Tail(region),
                    kmax,
                    &bootstrap,
                    &named(&format!("{name}_vardecomp")),
                    meta.clone(),
                )?;
            }
            let mut header = vec!["x", "left", "right"];
            if bands[0].is_some() {
                header = vec!["x", "left", "left_lower", "left_upper", "right", "right_lower", "right_upper"];
            }
            let rows: Vec<Vec<String>> = x_labels(&fm)
                .into_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut row = vec![x];
                    for (side, resp) in responses.iter().enumerate() {
                        row.push(fmt_f64(resp[i]));
                        if let Some(b) = &bands[side] {
                            row.push(fmt_f64(b.lower[i]));
                            row.push(fmt_f64(b.upper[i]));
                        }
                    }
                    row
                })
                .collect();
            write_csv(&out, &header, &rows)?;
            write_json(
                &sidecar(&out),
                &json!({
                    "lower_threshold": lo,
                    "upper_threshold": hi,
                    "model": meta,
                    "bootstrap": band_meta(&bands[0]),
                }),
            )
        }
    }
}

/// Power of ten that brings the largest mean into `[1, 10)`.
fn display_exponent(values: impl Iterator<Item = f64>) -> i32 {
    let max = values.fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        max.log10().floor() as i32
    } else {
        0
    }
}

pub fn backtest(args: BacktestArgs) -> Result<()> {
    ensure_parent(&args.out)?;
    let (_, panel) = load_panel(&args.input, &args.grid)?;
    let report = rolling_backtest(&panel, args.n_test, &args.k_candidates.0, args.n_validation)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![r.predictor.to_string(), r.measure.clone(), fmt_f64(r.mean), fmt_f64(r.median)])
        .collect();
    let scaling: serde_json::Map<String, Value> = ErrorReport::NAMES
        .iter()
        .map(|m| {
            let e = display_exponent(report.rows.iter().filter(|r| r.measure == *m).map(|r| r.mean));
            (m.to_string(), json!(e))
        })
        .collect();
    write_csv(&args.out, &["predictor", "measure", "mean", "median"], &rows)?;
    write_json(
        &sidecar(&args.out),
        &json!({
            "input": args.input,
            "kernel": args.grid.kernel,
            "grid": grid_json(panel.grid()),
            "periods": panel.len(),
            "n_test": args.n_test,
            "n_validation": args.n_validation,
            "k_candidates": args.k_candidates.0,
            "units": "errors are unitless; each measure's means are of order 10^exponent",
            "exponent": scaling,
            "test_periods": report.periods,
        }),
    )
}

fn study_table(config: &StudyConfig, result: &StudyResult) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["T".to_string(), "measure".to_string()];
    for n in &config.n_values {
        for p in Predictor::ALL {
            header.push(format!("N{n}_{p}_mean"));
            header.push(format!("N{n}_{p}_median"));
        }
    }
    let mut rows = Vec::new();
    for t in &config.t_values {
        for m in ErrorReport::NAMES {
            let mut row = vec![t.to_string(), m.to_string()];
            for n in &config.n_values {
                let cell = result.cell(*t, *n).expect("every configured cell is present");
                for p in Predictor::ALL {
                    let s = cell.stat(p, m).expect("every statistic is present");
                    row.push(fmt_f64(s.mean));
                    row.push(fmt_f64(s.median));
                }
            }
            rows.push(row);
        }
    }
    (header, rows)
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    ensure_parent(&args.out)?;
    let mut config: StudyConfig = fdar::io::read_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let fdar::simulation::GeneratorSpec::Model { path } = &mut config.generator {
        if path.is_relative() {
            *path = args.config.parent().unwrap_or(Path::new(".")).join(&*path);
        }
    }
    config.validate()?;
    let result = run_study(&config)?;
    let (header, rows) = study_table(&config, &result);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&args.out, &header, &rows)?;
    write_json(&sidecar(&args.out), &json!({ "config": config, "result": result }))
}

pub fn sample(args: SampleArgs) -> Result<()> {
    ensure_parent(&args.out)?;
    let f = read_density(&args.density)?;
    let draws = sample_density(&f, args.n, args.seed)?;
    fdar::io::write_observations(&args.out, &[(args.period, draws)])
}

pub fn run_pipeline(config_path: &Path) -> Result<()> {
    let cfg = PipelineConfig::load(config_path)?;
    if !cfg.output_dir.is_dir() {
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io { path: cfg.output_dir.clone(), source: e })?;
    }
    let out = |name: &str| cfg.output_dir.join(name);
    let raw = read_observations(&cfg.input)?;
    let grid = grid_for(&raw, cfg.grid.a, cfg.grid.b, cfg.grid.n, cfg.grid.coverage)?;
    let panel = estimate_panel(&raw, &grid, cfg.kernel)?;
    let k = choose_k(panel.densities(), &cfg.k)?;
    let model = FarMoments::new(panel.densities())?.fit(k)?;

    let model_path = out(match cfg.model_format {
        ModelFormat::Binary => "model.bin",
        ModelFormat::Json => "model.json",
    });
    save_model(&model, &model_path, cfg.model_format)?;
    write_scree(&out("scree.csv"), &model)?;
    write_densities(&out("densities.csv"), &panel)?;
    analyze(AnalyzeCommand::Features { model: model_path.clone(), m: cfg.analysis.features, out: out("features.csv") })?;

    let boot = BootstrapArgs {
        replications: cfg.bootstrap.as_ref().map(|b| b.replications),
        alpha: cfg.bootstrap.as_ref().map_or(0.05, |b| b.alpha),
        seed: cfg.bootstrap.as_ref().map(|b| b.seed),
    };
    let meta = model_meta(&model_path, &model);
    let mut files = Vec::new();
    for (i, func) in cfg.analysis.functionals.iter().enumerate() {
        let irf = out(&format!("irf_{}.csv", i + 1));
        let vd = out(&format!("vardecomp_{}.csv", i + 1));
        irf_outputs(&model, *func, &boot, &irf, meta.clone())?;
        vardecomp_outputs(&model, *func, cfg.analysis.decomposition_kmax, &boot, &vd, meta.clone())?;
        files.push(json!({ "functional": func, "irf": irf, "vardecomp": vd }));
    }
    write_json(
        &out("summary.json"),
        &json!({
            "config": cfg,
            "grid": grid_json(&grid),
            "periods": panel.len(),
            "k": k,
            "model": model_path,
            "analyses": files,
        }),
    )
}
