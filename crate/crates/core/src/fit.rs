//! Variational EM drivers and the piecewise-constant baseline.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, RecurrentDataset};
use crate::error::{Error, Result};
use crate::kernel::{ArdKernel, Interval};
use crate::numerics::{check_b, linspace};
use crate::objective::{
    diagonal_positions, pack_variational, panel_eval, poisson_interval_loglik, recurrent_eval, unpack_variational,
    PanelProblem, RecurrentProblem, Wrt,
};
use crate::optim::{minimize, OptOptions};
use crate::svgp::SparseVariationalGP;

/// Lower bound on the diagonal of `L` during optimization.
pub const DIAG_FLOOR: f64 = 1e-8;

/// Floor for the initial kernel variance when the data carry no events.
const MIN_INITIAL_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gp4c,
    Gp3,
    Gp4cw,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Gp4c => "gp4c",
            ModelKind::Gp3 => "gp3",
            ModelKind::Gp4cw => "gp4cw",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp4c" => Ok(ModelKind::Gp4c),
            "gp3" => Ok(ModelKind::Gp3),
            "gp4cw" => Ok(ModelKind::Gp4cw),
            other => Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_pseudo: usize,
    pub b: f64,
    pub max_vem_iters: usize,
    pub inner_opt_iters: usize,
    pub rel_tol: f64,
    pub jitter: f64,
    pub seed: u64,
    pub weight_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_pseudo: 30,
            b: 0.3,
            max_vem_iters: 100,
            inner_opt_iters: 50,
            rel_tol: 1e-6,
            jitter: 1e-6,
            seed: 0,
            weight_floor: 1e-6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pseudo < 2 {
            return Err(Error::InvalidConfig("n_pseudo must be at least 2".into()));
        }
        check_b(self.b).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be positive".into()));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::InvalidConfig("jitter must be positive".into()));
        }
        if !(self.weight_floor > 0.0) {
            return Err(Error::InvalidConfig("weight_floor must be positive".into()));
        }
        if self.max_vem_iters == 0 || self.inner_opt_iters == 0 {
            return Err(Error::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelKind,
    pub config: FitConfig,
    pub gp: SparseVariationalGP,
    /// Bound total at the initial state followed by one entry per vEM iteration.
    pub bound_trajectory: Vec<f64>,
    /// `(γ, a)` aligned with `bound_trajectory`.
    pub hyper_trajectory: Vec<(f64, f64)>,
    pub weights: Option<Vec<f64>>,
    pub subject_ids: Vec<String>,
    pub wall_time: f64,
    pub converged: bool,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.bound_trajectory.len().saturating_sub(1)
    }

    pub fn final_bound(&self) -> f64 {
        *self.bound_trajectory.last().expect("trajectory has the initial entry")
    }
}

fn validate_panel(data: &PanelDataset) -> Result<Interval> {
    if data.is_empty() {
        return Err(Error::InvalidData("dataset has no subjects".into()));
    }
    for s in &data.subjects {
        for r in &s.records {
            if r.count > 0 && r.interval.length() <= 0.0 {
                return Err(Error::InvalidData(format!(
                    "subject {}: zero-length interval at {} has count {}",
                    s.id, r.interval.start, r.count
                )));
            }
        }
    }
    let hull = data.hull().expect("nonempty");
    if hull.length() <= 0.0 {
        return Err(Error::InvalidData("data span a zero-length domain".into()));
    }
    Ok(hull)
}

/// Evenly spaced pseudo inputs over the hull, method-of-moments variance,
/// lengthscale a tenth of the hull, `μ = √γ`, `L = 0.1·chol(K)`.
pub fn initial_state(hull: Interval, events: f64, length: f64, cfg: &FitConfig) -> Result<SparseVariationalGP> {
    let gamma = (events / length).max(MIN_INITIAL_RATE);
    let kernel = ArdKernel::new(gamma, hull.length() / 10.0)?;
    let z = linspace(hull.start, hull.end, cfg.n_pseudo);
    let prior = SparseVariationalGP::prior(z, kernel, cfg.jitter)?;
    let mu = DVector::from_element(cfg.n_pseudo, gamma.sqrt());
    let l = prior.chol_sigma() * 0.1;
    prior.with_variational(mu, l)
}

fn inner_options(cfg: &FitConfig) -> OptOptions {
    OptOptions {
        max_iters: cfg.inner_opt_iters,
        ..Default::default()
    }
}

/// One objective over the variational or hyper parameters.
trait Model {
    fn value(&self, gp: &SparseVariationalGP) -> Result<f64>;
    fn e_step(&self, gp: &SparseVariationalGP, opts: &OptOptions) -> Result<SparseVariationalGP>;
    fn m_step(&self, gp: &SparseVariationalGP, opts: &OptOptions) -> Result<SparseVariationalGP>;
}

fn variational_lower_bounds(r: usize) -> Vec<f64> {
    let mut lower = vec![f64::NEG_INFINITY; r + r * (r + 1) / 2];
    for p in diagonal_positions(r) {
        lower[p] = DIAG_FLOOR;
    }
    lower
}

fn run_e_step<F>(gp: &SparseVariationalGP, opts: &OptOptions, mut eval: F) -> Result<SparseVariationalGP>
where
    F: FnMut(&SparseVariationalGP) -> Result<(f64, Vec<f64>)>,
{
    let r = gp.num_pseudo();
    let mut x0 = pack_variational(gp.mu(), gp.chol_sigma());
    for p in diagonal_positions(r) {
        x0[p] = x0[p].max(DIAG_FLOOR);
    }
    let out = minimize(
        |x| {
            let (mu, l) = unpack_variational(x, r);
            let cand = gp.with_variational(mu, l)?;
            let (v, g) = eval(&cand)?;
            Ok((-v, g.iter().map(|v| -v).collect()))
        },
        &x0,
        &variational_lower_bounds(r),
        opts,
    )?;
    log::debug!(
        "E-step: {} iterations, {} evaluations, f {:.6}, converged {}",
        out.iterations,
        out.evaluations,
        out.f,
        out.converged
    );
    let (mu, l) = unpack_variational(&out.x, r);
    gp.with_variational(mu, l)
}

fn run_m_step<F>(gp: &SparseVariationalGP, opts: &OptOptions, mut eval: F) -> Result<SparseVariationalGP>
where
    F: FnMut(&SparseVariationalGP) -> Result<(f64, Vec<f64>)>,
{
    let k = gp.kernel();
    let x0 = [k.variance().ln(), k.lengthscale().ln()];
    let out = minimize(
        |x| {
            let kernel = ArdKernel::new(x[0].exp(), x[1].exp())?;
            let cand = gp.with_kernel(kernel)?;
            let (v, g) = eval(&cand)?;
            Ok((-v, g.iter().map(|v| -v).collect()))
        },
        &x0,
        &[f64::NEG_INFINITY; 2],
        opts,
    )?;
    log::debug!(
        "M-step: {} iterations, {} evaluations, f {:.6}, converged {}",
        out.iterations,
        out.evaluations,
        out.f,
        out.converged
    );
    gp.with_kernel(ArdKernel::new(out.x[0].exp(), out.x[1].exp())?)
}

struct PanelModel {
    problem: PanelProblem,
    b: f64,
}

impl Model for PanelModel {
    fn value(&self, gp: &SparseVariationalGP) -> Result<f64> {
        let psi = self.problem.psi_set(gp, false);
        Ok(panel_eval(&self.problem, gp, &psi, self.b, None)?.0.total)
    }

    fn e_step(&self, gp: &SparseVariationalGP, opts: &OptOptions) -> Result<SparseVariationalGP> {
        let psi = self.problem.psi_set(gp, false);
        run_e_step(gp, opts, |cand| {
            let (v, g) = panel_eval(&self.problem, cand, &psi, self.b, Some(Wrt::Variational))?;
            Ok((v.objective(), g.expect("gradient").to_vec(Wrt::Variational)))
        })
    }

    fn m_step(&self, gp: &SparseVariationalGP, opts: &OptOptions) -> Result<SparseVariationalGP> {
        run_m_step(gp, opts, |cand| {
            let psi = self.problem.psi_set(cand, true);
            let (v, g) = panel_eval(&self.problem, cand, &psi, self.b, Some(Wrt::Hyper))?;
            Ok((v.objective(), g.expect("gradient").to_vec(Wrt::Hyper)))
        })
    }
}

struct RecurrentModel {
    problem: RecurrentProblem,
}

impl Model for RecurrentModel {
    fn value(&self, gp: &SparseVariationalGP) -> Result<f64> {
        let psi = self.problem.window_psi(gp, false);
        let ev = self.problem.event_cache(gp, false);
        Ok(recurrent_eval(&self.problem, gp, &psi, &ev, None)?.0.total)
    }

    fn e_step(&self, gp: &SparseVariationalGP, opts: &OptOptions) -> Result<SparseVariationalGP> {
        let psi = self.problem.window_psi(gp, false);
        let ev = self.problem.event_cache(gp, false);
        run_e_step(gp, opts, |cand| {
            let (v, g) = recurrent_eval(&self.problem, cand, &psi, &ev, Some(Wrt::Variational))?;
            Ok((v.objective(), g.expect("gradient").to_vec(Wrt::Variational)))
        })
    }

    fn m_step(&self, gp: &SparseVariationalGP, opts: &OptOptions) -> Result<SparseVariationalGP> {
        run_m_step(gp, opts, |cand| {
            let psi = self.problem.window_psi(cand, true);
            let ev = self.problem.event_cache(cand, true);
            let (v, g) = recurrent_eval(&self.problem, cand, &psi, &ev, Some(Wrt::Hyper))?;
            Ok((v.objective(), g.expect("gradient").to_vec(Wrt::Hyper)))
        })
    }
}

struct Trace {
    bounds: Vec<f64>,
    hypers: Vec<(f64, f64)>,
}

impl Trace {
    fn push(&mut self, bound: f64, gp: &SparseVariationalGP) {
        self.bounds.push(bound);
        self.hypers.push((gp.kernel().variance(), gp.kernel().lengthscale()));
    }
}

fn divergence(iteration: usize, err: Error) -> Error {
    match err {
        Error::Divergence { .. } => err,
        other => Error::Divergence {
            iteration,
            reason: other.to_string(),
        },
    }
}

/// Runs E and M steps until the relative bound change drops below `rel_tol`.
/// `after_m` may update extra state (subject weights) and returns the model
/// to use for the next iteration.
fn vem<M: Model>(
    mut model: M,
    mut gp: SparseVariationalGP,
    cfg: &FitConfig,
    mut after_m: impl FnMut(&SparseVariationalGP, M) -> Result<M>,
) -> Result<(SparseVariationalGP, Trace, bool)> {
    let opts = inner_options(cfg);
    let mut trace = Trace {
        bounds: Vec::new(),
        hypers: Vec::new(),
    };
    let initial = model.value(&gp).map_err(|e| divergence(0, e))?;
    if !initial.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            reason: format!("initial bound is {initial}"),
        });
    }
    trace.push(initial, &gp);
    let mut converged = false;
    for it in 1..=cfg.max_vem_iters {
        gp = model.e_step(&gp, &opts).map_err(|e| divergence(it, e))?;
        gp = model.m_step(&gp, &opts).map_err(|e| divergence(it, e))?;
        model = after_m(&gp, model).map_err(|e| divergence(it, e))?;
        let bound = model.value(&gp).map_err(|e| divergence(it, e))?;
        if !bound.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                reason: format!("bound became {bound}"),
            });
        }
        let prev = *trace.bounds.last().expect("initial entry");
        trace.push(bound, &gp);
        log::info!(
            "vEM iteration {it}: bound {bound:.6} gamma {:.4} lengthscale {:.4}",
            gp.kernel().variance(),
            gp.kernel().lengthscale()
        );
        if (bound - prev).abs() <= cfg.rel_tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok((gp, trace, converged))
}

pub fn fit_gp4c(data: &PanelDataset, cfg: &FitConfig) -> Result<FitResult> {
    fit_gp4c_inner(data, cfg, None)
}

/// As [`fit_gp4c`] but starting from `init` instead of the default state.
pub fn fit_gp4c_from(data: &PanelDataset, cfg: &FitConfig, init: SparseVariationalGP) -> Result<FitResult> {
    fit_gp4c_inner(data, cfg, Some(init))
}

fn fit_gp4c_inner(data: &PanelDataset, cfg: &FitConfig, init: Option<SparseVariationalGP>) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let hull = validate_panel(data)?;
    let gp = match init {
        Some(gp) => gp,
        None => initial_state(hull, data.total_count() as f64, data.total_length(), cfg)?,
    };
    let model = PanelModel {
        problem: PanelProblem::new(data, None)?,
        b: cfg.b,
    };
    let (gp, trace, converged) = vem(model, gp, cfg, |_, m| Ok(m))?;
    Ok(FitResult {
        model: ModelKind::Gp4c,
        config: cfg.clone(),
        gp,
        bound_trajectory: trace.bounds,
        hyper_trajectory: trace.hypers,
        weights: None,
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        wall_time: start.elapsed().as_secs_f64(),
        converged,
    })
}

/// `υ_k = max(ε, Σ_i m_i^(k) / E_q ∫_{X^(k)} f²)`.
pub fn closed_form_weights(gp: &SparseVariationalGP, data: &PanelDataset, floor: f64) -> Result<Vec<f64>> {
    data.subjects
        .iter()
        .map(|s| {
            let mass = gp.integrated_second_moment(s.window)?;
            let m = s.total_count() as f64;
            Ok(if m == 0.0 {
                floor
            } else {
                (m / mass.max(f64::MIN_POSITIVE)).max(floor)
            })
        })
        .collect()
}

pub fn fit_gp4cw(data: &PanelDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let hull = validate_panel(data)?;
    let gp = initial_state(hull, data.total_count() as f64, data.total_length(), cfg)?;
    let mut weights = vec![1.0; data.len()];
    let model = PanelModel {
        problem: PanelProblem::new(data, Some(&weights))?,
        b: cfg.b,
    };
    let (gp, trace, converged) = vem(model, gp, cfg, |gp, m| {
        weights = closed_form_weights(gp, data, cfg.weight_floor)?;
        Ok(PanelModel {
            problem: PanelProblem::new(data, Some(&weights))?,
            b: m.b,
        })
    })?;
    Ok(FitResult {
        model: ModelKind::Gp4cw,
        config: cfg.clone(),
        gp,
        bound_trajectory: trace.bounds,
        hyper_trajectory: trace.hypers,
        weights: Some(weights),
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        wall_time: start.elapsed().as_secs_f64(),
        converged,
    })
}

pub fn fit_gp3(data: &RecurrentDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    if data.is_empty() {
        return Err(Error::InvalidData("dataset has no subjects".into()));
    }
    let hull = data.hull().expect("nonempty");
    if hull.length() <= 0.0 {
        return Err(Error::InvalidData("data span a zero-length domain".into()));
    }
    let length: f64 = data.subjects.iter().map(|s| s.window.length()).sum();
    let gp = initial_state(hull, data.num_events() as f64, length, cfg)?;
    let model = RecurrentModel {
        problem: RecurrentProblem::new(data),
    };
    let (gp, trace, converged) = vem(model, gp, cfg, |_, m| Ok(m))?;
    Ok(FitResult {
        model: ModelKind::Gp3,
        config: cfg.clone(),
        gp,
        bound_trajectory: trace.bounds,
        hyper_trajectory: trace.hypers,
        weights: None,
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        wall_time: start.elapsed().as_secs_f64(),
        converged,
    })
}

/// Pointwise intensity summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityBand {
    pub x: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Posterior mean `E_q f²(x)` and an equal-tailed credible band from joint
/// samples of `f²`.
pub fn predict_intensity(
    fit: &FitResult,
    grid: &[f64],
    credible_mass: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<IntensityBand>> {
    predict_intensity_scaled(&fit.gp, grid, credible_mass, mc_samples, seed, 1.0)
}

/// As [`predict_intensity`] for a state, with every value multiplied by `scale`
/// (a subject weight).
pub fn predict_intensity_scaled(
    gp: &SparseVariationalGP,
    grid: &[f64],
    credible_mass: f64,
    mc_samples: usize,
    seed: u64,
    scale: f64,
) -> Result<Vec<IntensityBand>> {
    if !(credible_mass > 0.0 && credible_mass < 1.0) {
        return Err(Error::Domain(format!(
            "credible mass must be in (0, 1), got {credible_mass}"
        )));
    }
    if mc_samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("prediction grid must be sorted".into()));
    }
    let moments = gp.posterior_moments(grid)?;
    let sampler = gp.path_sampler(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = DMatrix::<f64>::zeros(grid.len(), mc_samples);
    for u in 0..mc_samples {
        let f = sampler.sample(&mut rng);
        for (i, v) in f.iter().enumerate() {
            draws[(i, u)] = v * v * scale;
        }
    }
    let lo_q = 0.5 * (1.0 - credible_mass);
    let hi_q = 0.5 * (1.0 + credible_mass);
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut row: Vec<f64> = draws.row(i).iter().copied().collect();
            row.sort_by(f64::total_cmp);
            let (m, v) = moments[i];
            IntensityBand {
                x,
                mean: (m * m + v) * scale,
                lower: quantile(&row, lo_q),
                upper: quantile(&row, hi_q),
            }
        })
        .collect())
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// An intensity constant on equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub edges: Vec<f64>,
    pub rates: Vec<f64>,
}

impl StepFunction {
    /// Value at `x`; outside the edges the nearest bin applies.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.rates.len();
        let idx = self.edges[1..n].partition_point(|e| *e <= x);
        self.rates[idx.min(n - 1)]
    }

    /// `∫_iv λ`, extending the end bins beyond the edges.
    pub fn integral(&self, iv: Interval) -> f64 {
        self.overlaps(iv).iter().zip(&self.rates).map(|(o, r)| o * r).sum()
    }

    fn overlaps(&self, iv: Interval) -> Vec<f64> {
        let n = self.rates.len();
        (0..n)
            .map(|b| {
                let lo = if b == 0 { f64::NEG_INFINITY } else { self.edges[b] };
                let hi = if b == n - 1 { f64::INFINITY } else { self.edges[b + 1] };
                (iv.end.min(hi) - iv.start.max(lo)).max(0.0)
            })
            .collect()
    }

    /// Exact panel log-likelihood including `ln m!`.
    pub fn panel_loglik(&self, data: &PanelDataset) -> Result<f64> {
        let mut total = 0.0;
        for s in &data.subjects {
            for r in &s.records {
                total += poisson_interval_loglik(self.integral(r.interval), r.count)?;
            }
        }
        Ok(total)
    }
}

/// `⌈√(number of intervals)⌉`.
pub fn default_bins(data: &PanelDataset) -> usize {
    ((data.num_intervals() as f64).sqrt().ceil() as usize).max(1)
}

/// Maximum-likelihood step function on `n_bins` equal bins over the data hull,
/// by the multiplicative EM update `λ_b ← λ_b Σ_I (m_I o_Ib / r_I) / Σ_I o_Ib`.
pub fn fit_piecewise_constant(data: &PanelDataset, n_bins: usize, max_iters: usize) -> Result<StepFunction> {
    Ok(fit_piecewise_constant_traced(data, n_bins, max_iters)?.0)
}

pub(crate) fn fit_piecewise_constant_traced(
    data: &PanelDataset,
    n_bins: usize,
    max_iters: usize,
) -> Result<(StepFunction, Vec<f64>)> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be at least 1".into()));
    }
    let hull = data
        .hull()
        .ok_or_else(|| Error::InvalidData("dataset has no subjects".into()))?;
    if hull.length() <= 0.0 {
        return Err(Error::InvalidData("data span a zero-length domain".into()));
    }
    let edges = linspace(hull.start, hull.end, n_bins + 1);
    let init = data.total_count() as f64 / data.total_length().max(f64::MIN_POSITIVE);
    let mut step = StepFunction {
        edges,
        rates: vec![init; n_bins],
    };
    let records: Vec<(Vec<f64>, f64)> = data
        .subjects
        .iter()
        .flat_map(|s| s.records.iter())
        .map(|r| (step.overlaps(r.interval), r.count as f64))
        .collect();
    let exposure: Vec<f64> = (0..n_bins).map(|b| records.iter().map(|(o, _)| o[b]).sum()).collect();
    let mut trace = vec![step.panel_loglik(data)?];
    for _ in 0..max_iters {
        let mut num = vec![0.0; n_bins];
        for (o, m) in &records {
            if *m == 0.0 {
                continue;
            }
            let r: f64 = o.iter().zip(&step.rates).map(|(a, l)| a * l).sum();
            if r > 0.0 {
                for b in 0..n_bins {
                    num[b] += m * o[b] / r;
                }
            }
        }
        for b in 0..n_bins {
            if exposure[b] > 0.0 {
                step.rates[b] *= num[b] / exposure[b];
            }
        }
        trace.push(step.panel_loglik(data)?);
    }
    Ok((step, trace))
}
