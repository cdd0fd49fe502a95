//! `key = value` experiment configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use panelgp::fit::{FitConfig, ModelKind};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Gp(ModelKind),
    PiecewiseConstant,
}

impl ModelChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ModelChoice::Gp(k) => k.name(),
            ModelChoice::PiecewiseConstant => "pwc",
        }
    }
}

impl FromStr for ModelChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pwc" => Ok(ModelChoice::PiecewiseConstant),
            other => other
                .parse::<ModelKind>()
                .map(ModelChoice::Gp)
                .map_err(|_| format!("unknown model {other:?} (expected gp4c, gp3, gp4cw or pwc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityChoice {
    H1,
    Constant,
    Gp,
}

impl FromStr for IntensityChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "h1" => Ok(IntensityChoice::H1),
            "constant" => Ok(IntensityChoice::Constant),
            "gp" => Ok(IntensityChoice::Gp),
            other => Err(format!("unknown intensity {other:?} (expected h1, constant or gp)")),
        }
    }
}

impl IntensityChoice {
    fn name(&self) -> &'static str {
        match self {
            IntensityChoice::H1 => "h1",
            IntensityChoice::Constant => "constant",
            IntensityChoice::Gp => "gp",
        }
    }
}

/// Every setting any subcommand reads. Unset paths are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub seed: u64,
    pub out: PathBuf,

    pub n_pseudo: usize,
    pub b: f64,
    pub max_vem_iters: usize,
    pub inner_opt_iters: usize,
    pub rel_tol: f64,
    pub jitter: f64,
    pub weight_floor: f64,
    /// 0 picks the square-root rule.
    pub pwc_bins: usize,
    pub pwc_iters: usize,

    pub intensity: IntensityChoice,
    pub intensity_value: f64,
    pub gp_variance: f64,
    pub gp_lengthscale: f64,
    /// Grid the GP intensity is drawn on.
    pub gp_grid: usize,
    pub n_subjects: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub n_intervals: usize,
    pub dirichlet_alpha: f64,
    /// Both zero means homogeneous subjects.
    pub rate_min: f64,
    pub rate_max: f64,
    pub truth_grid: usize,

    pub train: PathBuf,
    pub test: PathBuf,
    pub model_file: PathBuf,
    pub truth: PathBuf,

    pub mc_samples: usize,
    pub path_grid: usize,
    pub quad_points: usize,
    pub mise_points: usize,
    /// 0 skips the intensity curve.
    pub curve_points: usize,
    pub credible_mass: f64,
    pub band_samples: usize,

    pub phi_min: f64,
    pub phi_max: f64,
    pub phi_count: usize,
    pub b_count: usize,

    pub trials: usize,
    pub train_fraction: f64,
    pub bench_m: Vec<usize>,
    pub bench_ratios: Vec<f64>,
    pub bench_test_ll: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            model: ModelChoice::Gp(ModelKind::Gp4c),
            seed: 0,
            out: PathBuf::from("out"),
            n_pseudo: fit.n_pseudo,
            b: fit.b,
            max_vem_iters: fit.max_vem_iters,
            inner_opt_iters: fit.inner_opt_iters,
            rel_tol: fit.rel_tol,
            jitter: fit.jitter,
            weight_floor: fit.weight_floor,
            pwc_bins: 0,
            pwc_iters: 500,
            intensity: IntensityChoice::H1,
            intensity_value: 4.0,
            gp_variance: 1.0,
            gp_lengthscale: 5.0,
            gp_grid: 3001,
            n_subjects: 100,
            t_start: 0.0,
            t_end: 60.0,
            n_intervals: 10,
            dirichlet_alpha: 1.0,
            rate_min: 0.0,
            rate_max: 0.0,
            truth_grid: 6001,
            train: PathBuf::new(),
            test: PathBuf::new(),
            model_file: PathBuf::new(),
            truth: PathBuf::new(),
            mc_samples: 50,
            path_grid: 3001,
            quad_points: 501,
            mise_points: 6001,
            curve_points: 0,
            credible_mass: 0.75,
            band_samples: 1000,
            phi_min: 1e-6,
            phi_max: 1e6,
            phi_count: 5000,
            b_count: 50,
            trials: 10,
            train_fraction: 0.5,
            bench_m: vec![10, 20, 40],
            bench_ratios: vec![0.25, 0.5, 1.0],
            bench_test_ll: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Input(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "model" => self.model = v.parse().map_err(CliError::Input)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "n_pseudo" => self.n_pseudo = parse(key, v)?,
            "b" => self.b = parse(key, v)?,
            "max_vem_iters" => self.max_vem_iters = parse(key, v)?,
            "inner_opt_iters" => self.inner_opt_iters = parse(key, v)?,
            "rel_tol" => self.rel_tol = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "weight_floor" => self.weight_floor = parse(key, v)?,
            "pwc_bins" => self.pwc_bins = parse(key, v)?,
            "pwc_iters" => self.pwc_iters = parse(key, v)?,
            "intensity" => self.intensity = v.parse().map_err(CliError::Input)?,
            "intensity_value" => self.intensity_value = parse(key, v)?,
            "gp_variance" => self.gp_variance = parse(key, v)?,
            "gp_lengthscale" => self.gp_lengthscale = parse(key, v)?,
            "gp_grid" => self.gp_grid = parse(key, v)?,
            "n_subjects" => self.n_subjects = parse(key, v)?,
            "t_start" => self.t_start = parse(key, v)?,
            "t_end" => self.t_end = parse(key, v)?,
            "n_intervals" => self.n_intervals = parse(key, v)?,
            "dirichlet_alpha" => self.dirichlet_alpha = parse(key, v)?,
            "rate_min" => self.rate_min = parse(key, v)?,
            "rate_max" => self.rate_max = parse(key, v)?,
            "truth_grid" => self.truth_grid = parse(key, v)?,
            "train" => self.train = PathBuf::from(v),
            "test" => self.test = PathBuf::from(v),
            "model_file" => self.model_file = PathBuf::from(v),
            "truth" => self.truth = PathBuf::from(v),
            "mc_samples" => self.mc_samples = parse(key, v)?,
            "path_grid" => self.path_grid = parse(key, v)?,
            "quad_points" => self.quad_points = parse(key, v)?,
            "mise_points" => self.mise_points = parse(key, v)?,
            "curve_points" => self.curve_points = parse(key, v)?,
            "credible_mass" => self.credible_mass = parse(key, v)?,
            "band_samples" => self.band_samples = parse(key, v)?,
            "phi_min" => self.phi_min = parse(key, v)?,
            "phi_max" => self.phi_max = parse(key, v)?,
            "phi_count" => self.phi_count = parse(key, v)?,
            "b_count" => self.b_count = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "bench_m" => self.bench_m = parse_list(key, v)?,
            "bench_ratios" => self.bench_ratios = parse_list(key, v)?,
            "bench_test_ll" => self.bench_test_ll = parse(key, v)?,
            other => return Err(CliError::Input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// All settings as `(key, value)` pairs; feeding them back through
    /// [`ExperimentConfig::set`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = |p: &Path| p.display().to_string();
        vec![
            ("model", self.model.name().to_string()),
            ("seed", self.seed.to_string()),
            ("out", p(&self.out)),
            ("n_pseudo", self.n_pseudo.to_string()),
            ("b", self.b.to_string()),
            ("max_vem_iters", self.max_vem_iters.to_string()),
            ("inner_opt_iters", self.inner_opt_iters.to_string()),
            ("rel_tol", self.rel_tol.to_string()),
            ("jitter", self.jitter.to_string()),
            ("weight_floor", self.weight_floor.to_string()),
            ("pwc_bins", self.pwc_bins.to_string()),
            ("pwc_iters", self.pwc_iters.to_string()),
            ("intensity", self.intensity.name().to_string()),
            ("intensity_value", self.intensity_value.to_string()),
            ("gp_variance", self.gp_variance.to_string()),
            ("gp_lengthscale", self.gp_lengthscale.to_string()),
            ("gp_grid", self.gp_grid.to_string()),
            ("n_subjects", self.n_subjects.to_string()),
            ("t_start", self.t_start.to_string()),
            ("t_end", self.t_end.to_string()),
            ("n_intervals", self.n_intervals.to_string()),
            ("dirichlet_alpha", self.dirichlet_alpha.to_string()),
            ("rate_min", self.rate_min.to_string()),
            ("rate_max", self.rate_max.to_string()),
            ("truth_grid", self.truth_grid.to_string()),
            ("train", p(&self.train)),
            ("test", p(&self.test)),
            ("model_file", p(&self.model_file)),
            ("truth", p(&self.truth)),
            ("mc_samples", self.mc_samples.to_string()),
            ("path_grid", self.path_grid.to_string()),
            ("quad_points", self.quad_points.to_string()),
            ("mise_points", self.mise_points.to_string()),
            ("curve_points", self.curve_points.to_string()),
            ("credible_mass", self.credible_mass.to_string()),
            ("band_samples", self.band_samples.to_string()),
            ("phi_min", self.phi_min.to_string()),
            ("phi_max", self.phi_max.to_string()),
            ("phi_count", self.phi_count.to_string()),
            ("b_count", self.b_count.to_string()),
            ("trials", self.trials.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("bench_m", join(&self.bench_m)),
            ("bench_ratios", join(&self.bench_ratios)),
            ("bench_test_ll", self.bench_test_ll.to_string()),
        ]
    }

    /// Applies a config file body over `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("config line {}: expected `key = value`", lineno + 1)))?;
            self.set(key, value)
                .map_err(|e| CliError::Input(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("--set expects key=value, got {assignment:?}")))?;
        self.set(key, value)
    }

    pub fn snapshot(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            n_pseudo: self.n_pseudo,
            b: self.b,
            max_vem_iters: self.max_vem_iters,
            inner_opt_iters: self.inner_opt_iters,
            rel_tol: self.rel_tol,
            jitter: self.jitter,
            seed: self.seed,
            weight_floor: self.weight_floor,
        }
    }
}
