//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use panelgp::data::{
    draw_gp_intensity, read_panel_csv, read_recurrent_csv, simulate, split_indices, write_panel_csv,
    write_recurrent_csv, IntensitySpec, PanelDataset, SyntheticData, SyntheticDesign,
};
use panelgp::eval::{mise, plugin_log_likelihood, test_log_likelihood, EvalReport, EvalSettings};
use panelgp::fit::{
    default_bins, fit_gp3, fit_gp4c, fit_gp4cw, fit_piecewise_constant, predict_intensity, FitResult, ModelKind,
    StepFunction,
};
use panelgp::kernel::{ArdKernel, Interval};
use panelgp::numerics::{linspace, logspace, select_b};

use crate::config::{ExperimentConfig, IntensityChoice, ModelChoice};
use crate::error::CliError;
use crate::model_io::{read_model, write_model, SavedModel};

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io("cannot create output directory", &cfg.out, e))?;
    let snap = cfg.out.join(RESOLVED_CONFIG);
    fs::write(&snap, cfg.snapshot()).map_err(|e| CliError::io("cannot write", &snap, e))?;
    Ok(cfg.out.clone())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io("cannot write", path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_text(path, &(text + "\n"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::io("cannot write", path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::io("cannot write", path, e)
}

fn require(path: &Path, key: &str) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Input(format!("`{key}` is not set")));
    }
    Ok(())
}

fn window(cfg: &ExperimentConfig) -> Result<Interval, CliError> {
    Ok(Interval::new(cfg.t_start, cfg.t_end)?)
}

/// The generating intensity described by the config. GP draws use `cfg.seed`
/// so every trial of a sweep shares one truth.
pub fn intensity_spec(cfg: &ExperimentConfig) -> Result<IntensitySpec, CliError> {
    let spec = match cfg.intensity {
        IntensityChoice::H1 => IntensitySpec::h1(),
        IntensityChoice::Constant => IntensitySpec::Constant {
            value: cfg.intensity_value,
        },
        IntensityChoice::Gp => {
            let kernel = ArdKernel::new(cfg.gp_variance, cfg.gp_lengthscale)?;
            draw_gp_intensity(&kernel, window(cfg)?, cfg.gp_grid, cfg.seed)?
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn design(cfg: &ExperimentConfig) -> Result<SyntheticDesign, CliError> {
    if cfg.n_intervals == 0 {
        return Err(CliError::Input("n_intervals must be at least 1".into()));
    }
    let rate_multipliers = match (cfg.rate_min, cfg.rate_max) {
        (lo, hi) if lo == 0.0 && hi == 0.0 => None,
        (lo, hi) if lo > 0.0 && hi >= lo => Some((lo, hi)),
        (lo, hi) => return Err(CliError::Input(format!("bad rate multiplier range [{lo}, {hi}]"))),
    };
    Ok(SyntheticDesign {
        n_subjects: cfg.n_subjects,
        window: window(cfg)?,
        theta: vec![cfg.dirichlet_alpha; cfg.n_intervals],
        rate_multipliers,
    })
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let spec = intensity_spec(cfg)?;
    let data = simulate(&spec, &design(cfg)?, cfg.seed)?;
    write_recurrent_csv(&data.recurrent, out.join("recurrent.csv"))?;
    write_panel_csv(&data.panel, out.join("panel.csv"))?;
    let truth = out.join("truth.csv");
    let mut w = csv_writer(&truth)?;
    w.write_record(["x", "lambda"]).map_err(csv_err(&truth))?;
    for x in linspace(cfg.t_start, cfg.t_end, cfg.truth_grid.max(2)) {
        w.write_record([format!("{x:e}"), format!("{:e}", spec.eval(x))])
            .map_err(csv_err(&truth))?;
    }
    w.flush().map_err(|e| CliError::io("cannot write", &truth, e))?;
    if cfg.rate_max > 0.0 {
        let path = out.join("multipliers.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["subject_id", "multiplier"]).map_err(csv_err(&path))?;
        for (s, m) in data.panel.subjects.iter().zip(&data.multipliers) {
            w.write_record([s.id.clone(), format!("{m:e}")])
                .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| CliError::io("cannot write", &path, e))?;
    }
    log::info!(
        "simulated {} subjects with {} events",
        data.panel.len(),
        data.recurrent.num_events()
    );
    Ok(())
}

/// Fits whichever model the config names on panel data (or the matching
/// recurrent data for GP3).
pub fn fit_model(cfg: &ExperimentConfig) -> Result<SavedModel, CliError> {
    require(&cfg.train, "train")?;
    match cfg.model {
        ModelChoice::Gp(ModelKind::Gp3) => Ok(SavedModel::Gp(Box::new(fit_gp3(
            &read_recurrent_csv(&cfg.train)?,
            &cfg.fit_config(),
        )?))),
        ModelChoice::Gp(kind) => {
            let data = read_panel_csv(&cfg.train)?;
            let fit = match kind {
                ModelKind::Gp4cw => fit_gp4cw(&data, &cfg.fit_config())?,
                _ => fit_gp4c(&data, &cfg.fit_config())?,
            };
            Ok(SavedModel::Gp(Box::new(fit)))
        }
        ModelChoice::PiecewiseConstant => {
            let data = read_panel_csv(&cfg.train)?;
            Ok(SavedModel::Step(fit_step(&data, cfg)?))
        }
    }
}

fn fit_step(data: &PanelDataset, cfg: &ExperimentConfig) -> Result<StepFunction, CliError> {
    let bins = if cfg.pwc_bins == 0 {
        default_bins(data)
    } else {
        cfg.pwc_bins
    };
    Ok(fit_piecewise_constant(data, bins, cfg.pwc_iters)?)
}

pub fn cmd_fit(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let start = Instant::now();
    let model = fit_model(cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_model(&model, &out.join("model.txt"))?;
    let summary = match &model {
        SavedModel::Gp(fit) => json!({
            "model": fit.model.name(),
            "final_bound": fit.final_bound(),
            "gamma": fit.gp.kernel().variance(),
            "lengthscale": fit.gp.kernel().lengthscale(),
            "iterations": fit.iterations(),
            "converged": fit.converged,
            "wall_time_s": fit.wall_time,
            "weights": fit.weights,
        }),
        SavedModel::Step(step) => json!({
            "model": "pwc",
            "bins": step.rates.len(),
            "wall_time_s": elapsed,
        }),
    };
    write_json(&out.join("summary.json"), &summary)
}

/// `x,lambda` table read back as a piecewise-linear intensity.
pub fn read_truth(path: &Path) -> Result<IntensitySpec, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::io("cannot read", path, e))?;
    let (mut x, mut values) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io("cannot read", path, e))?;
        let row = i + 2;
        let field = |j: usize, name: &str| -> Result<f64, CliError> {
            rec.get(j)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Input(format!("{}: row {row}, column {name}: not a number", path.display())))
        };
        x.push(field(0, "x")?);
        values.push(field(1, "lambda")?);
    }
    let spec = IntensitySpec::Table { x, values };
    spec.validate()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn truth_domain(spec: &IntensitySpec) -> Option<Interval> {
    match spec {
        IntensitySpec::Table { x, .. } => Some(Interval {
            start: x[0],
            end: x[x.len() - 1],
        }),
        _ => None,
    }
}

fn step_report(step: &StepFunction, test: &PanelDataset, settings: EvalSettings) -> Result<EvalReport, CliError> {
    let start = Instant::now();
    let per = plugin_log_likelihood(|x| step.eval(x), test, settings.quad_points)?;
    Ok(EvalReport {
        mise: None,
        test_ll: per.iter().map(|(_, v)| v).sum(),
        per_subject_ll: per.clone(),
        per_subject_marginal_ll: per,
        wall_time: start.elapsed().as_secs_f64(),
        settings,
    })
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    require(&cfg.model_file, "model_file")?;
    require(&cfg.test, "test")?;
    let model = read_model(&cfg.model_file)?;
    let test = read_panel_csv(&cfg.test)?;
    let truth = if cfg.truth.as_os_str().is_empty() {
        None
    } else {
        Some(read_truth(&cfg.truth)?)
    };
    let out = prepare_out(cfg)?;
    let settings = EvalSettings {
        samples: cfg.mc_samples,
        path_grid: cfg.path_grid,
        quad_points: cfg.quad_points,
        seed: cfg.seed,
    };
    let mut report = match &model {
        SavedModel::Gp(fit) => test_log_likelihood(fit, &test, &settings)?,
        SavedModel::Step(step) => step_report(step, &test, settings)?,
    };
    if let Some(truth) = &truth {
        let dom = truth_domain(truth).expect("tables have a domain");
        report.mise = Some(match &model {
            SavedModel::Gp(fit) => mise(|x| posterior_mean(fit, x), |x| truth.eval(x), dom, cfg.mise_points)?,
            SavedModel::Step(step) => mise(|x| step.eval(x), |x| truth.eval(x), dom, cfg.mise_points)?,
        });
    }
    write_json(&out.join("eval.json"), &report)?;

    let path = out.join("per_subject.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["subject_id", "test_ll", "marginal_ll"])
        .map_err(csv_err(&path))?;
    for ((id, v), (_, m)) in report.per_subject_ll.iter().zip(&report.per_subject_marginal_ll) {
        w.write_record([id.clone(), format!("{v:e}"), format!("{m:e}")])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io("cannot write", &path, e))?;

    if cfg.curve_points > 0 {
        let dom = match (&truth, &model) {
            (Some(t), _) => truth_domain(t).expect("tables have a domain"),
            (None, SavedModel::Gp(fit)) => {
                let z = fit.gp.pseudo_inputs();
                Interval {
                    start: z[0],
                    end: z[z.len() - 1],
                }
            }
            (None, SavedModel::Step(step)) => Interval {
                start: step.edges[0],
                end: step.edges[step.edges.len() - 1],
            },
        };
        let grid = linspace(dom.start, dom.end, cfg.curve_points);
        let rows: Vec<[f64; 4]> = match &model {
            SavedModel::Gp(fit) => predict_intensity(fit, &grid, cfg.credible_mass, cfg.band_samples, cfg.seed)?
                .iter()
                .map(|p| [p.x, p.mean, p.lower, p.upper])
                .collect(),
            SavedModel::Step(step) => grid
                .iter()
                .map(|&x| [x, step.eval(x), step.eval(x), step.eval(x)])
                .collect(),
        };
        let path = out.join("curve.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["x", "mean", "lower", "upper"])
            .map_err(csv_err(&path))?;
        for r in rows {
            w.write_record(r.map(|v| format!("{v:e}"))).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| CliError::io("cannot write", &path, e))?;
    }
    log::info!("test log-likelihood {:.4}", report.test_ll);
    Ok(())
}

pub fn posterior_mean(fit: &FitResult, x: f64) -> f64 {
    let (m, v) = fit.gp.posterior_moments_at(x).expect("finite input");
    m * m + v
}

pub fn cmd_select_b(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.phi_count == 0 || cfg.b_count == 0 {
        return Err(CliError::Input("phi_count and b_count must be positive".into()));
    }
    let out = prepare_out(cfg)?;
    let phi = if cfg.phi_count == 1 {
        vec![cfg.phi_min]
    } else {
        logspace(cfg.phi_min, cfg.phi_max, cfg.phi_count)
    };
    let (b_star, grid) = select_b(&phi, &linspace(0.0, 1.0, cfg.b_count))?;
    let path = out.join("gap_grid.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["b", "variance"]).map_err(csv_err(&path))?;
    for (b, v) in grid.b_values.iter().zip(&grid.variances) {
        w.write_record([format!("{b:e}"), format!("{v:e}")])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io("cannot write", &path, e))?;
    write_json(
        &out.join("select_b.json"),
        &json!({"b_star": b_star, "phi_count": phi.len(), "b_count": cfg.b_count}),
    )?;
    log::info!("b* = {b_star}");
    Ok(())
}

/// Outcome of one fit inside a sweep.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub wall_time: f64,
    pub iterations: usize,
    pub final_bound: f64,
    pub mise: f64,
    pub test_ll: Option<f64>,
}

/// Summary of one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub sweep: String,
    pub value: f64,
    pub trials: usize,
    pub failures: usize,
    pub time: [f64; 3],
    pub per_iteration: [f64; 3],
    pub bound: [f64; 3],
    pub mise: [f64; 3],
    pub test_ll: Option<[f64; 3]>,
}

/// `[median, q25, q75]` with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> [f64; 3] {
    if values.is_empty() {
        return [f64::NAN; 3];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    [q(0.5), q(0.25), q(0.75)]
}

/// Simulates, splits and fits one trial. `train_ratio` keeps that fraction of
/// the training subjects; `n_pseudo` overrides the config.
pub fn run_trial(
    cfg: &ExperimentConfig,
    spec: &IntensitySpec,
    trial: usize,
    n_pseudo: usize,
    train_ratio: f64,
) -> Result<TrialResult, CliError> {
    let seed = cfg.seed + trial as u64;
    let data: SyntheticData = simulate(spec, &design(cfg)?, seed)?;
    let (train_idx, test_idx) = split_indices(data.panel.len(), cfg.train_fraction, seed)?;
    let keep = ((train_idx.len() as f64 * train_ratio).round() as usize).clamp(1, train_idx.len());
    let train_idx = &train_idx[..keep];
    let mut fc = cfg.fit_config();
    fc.n_pseudo = n_pseudo;
    fc.seed = seed;
    let dom = window(cfg)?;
    let test = data.panel.subset(&test_idx);
    let settings = EvalSettings {
        samples: cfg.mc_samples,
        path_grid: cfg.path_grid,
        quad_points: cfg.quad_points,
        seed,
    };
    let start = Instant::now();
    let (fit, step) = match cfg.model {
        ModelChoice::Gp(ModelKind::Gp3) => (Some(fit_gp3(&data.recurrent.subset(train_idx), &fc)?), None),
        ModelChoice::Gp(ModelKind::Gp4cw) => (Some(fit_gp4cw(&data.panel.subset(train_idx), &fc)?), None),
        ModelChoice::Gp(ModelKind::Gp4c) => (Some(fit_gp4c(&data.panel.subset(train_idx), &fc)?), None),
        ModelChoice::PiecewiseConstant => (None, Some(fit_step(&data.panel.subset(train_idx), cfg)?)),
    };
    let elapsed = start.elapsed().as_secs_f64();
    Ok(match (fit, step) {
        (Some(fit), _) => TrialResult {
            wall_time: fit.wall_time,
            iterations: fit.iterations(),
            final_bound: fit.final_bound(),
            mise: mise(|x| posterior_mean(&fit, x), |x| spec.eval(x), dom, cfg.mise_points)?,
            test_ll: if cfg.bench_test_ll {
                Some(test_log_likelihood(&fit, &test, &settings)?.test_ll)
            } else {
                None
            },
        },
        (None, Some(step)) => TrialResult {
            wall_time: elapsed,
            iterations: cfg.pwc_iters,
            final_bound: step.panel_loglik(&data.panel.subset(train_idx))?,
            mise: mise(|x| step.eval(x), |x| spec.eval(x), dom, cfg.mise_points)?,
            test_ll: if cfg.bench_test_ll {
                Some(step_report(&step, &test, settings)?.test_ll)
            } else {
                None
            },
        },
        (None, None) => unreachable!("one model is always fitted"),
    })
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PANELGP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("PANELGP_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| CliError::Input(format!("cannot start worker pool: {e}")))
}

/// Runs the pseudo-input sweep then the training-ratio sweep.
pub fn bench_rows(cfg: &ExperimentConfig) -> Result<Vec<BenchRow>, CliError> {
    if cfg.trials == 0 {
        return Err(CliError::Input("trials must be positive".into()));
    }
    let spec = intensity_spec(cfg)?;
    design(cfg)?;
    let pool = thread_pool()?;
    let mut cells: Vec<(&str, f64, usize, f64)> = cfg.bench_m.iter().map(|&m| ("m", m as f64, m, 1.0)).collect();
    cells.extend(cfg.bench_ratios.iter().map(|&r| ("ratio", r, cfg.n_pseudo, r)));
    let mut rows = Vec::with_capacity(cells.len());
    for (sweep, value, m, ratio) in cells {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(CliError::Input(format!("training ratio {ratio} is outside (0, 1]")));
        }
        let results: Vec<Result<TrialResult, CliError>> = pool.install(|| {
            (0..cfg.trials)
                .into_par_iter()
                .map(|t| run_trial(cfg, &spec, t, m, ratio))
                .collect()
        });
        let ok: Vec<&TrialResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        for (t, r) in results.iter().enumerate() {
            if let Err(e) = r {
                log::warn!("{sweep}={value} trial {t} failed: {e}");
            }
        }
        let pick = |f: fn(&TrialResult) -> f64| quartiles(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let test_ll: Vec<f64> = ok.iter().filter_map(|r| r.test_ll).collect();
        rows.push(BenchRow {
            sweep: sweep.to_string(),
            value,
            trials: cfg.trials,
            failures: cfg.trials - ok.len(),
            time: pick(|r| r.wall_time),
            per_iteration: pick(|r| r.wall_time / r.iterations.max(1) as f64),
            bound: pick(|r| r.final_bound),
            mise: pick(|r| r.mise),
            test_ll: (!test_ll.is_empty()).then(|| quartiles(&test_ll)),
        });
    }
    Ok(rows)
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg)?;
    let rows = bench_rows(cfg)?;
    let path = out.join("bench.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["sweep".to_string(), "value".into(), "trials".into(), "failures".into()];
    for name in ["time", "per_iteration", "bound", "mise", "test_ll"] {
        for q in ["median", "q25", "q75"] {
            header.push(format!("{name}_{q}"));
        }
    }
    w.write_record(&header).map_err(csv_err(&path))?;
    for r in &rows {
        let mut rec = vec![
            r.sweep.clone(),
            r.value.to_string(),
            r.trials.to_string(),
            r.failures.to_string(),
        ];
        for q in [r.time, r.per_iteration, r.bound, r.mise] {
            rec.extend(q.iter().map(|v| format!("{v:e}")));
        }
        match r.test_ll {
            Some(q) => rec.extend(q.iter().map(|v| format!("{v:e}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), 3)),
        }
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::io("cannot write", &path, e))
}
