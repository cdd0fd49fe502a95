//! Variational objectives: the tractable panel-data bound, the exact-term
//! ELBO for recurrent events, their analytic gradients, and a Monte-Carlo
//! estimate of the intractable panel ELBO.
//!
//! Everything is written in terms of `W_b = ααᵀ + b(K⁻¹ΣK⁻¹ − K⁻¹)` with
//! `α = K⁻¹μ`, so that for an interval `I`
//!
//! ```text
//! ∫_I mean² + b·∫_I variance = ⟨Ψ_I, W_b⟩ + bγ|I|
//! ```
//!
//! which costs `O(R²)` per interval once `W_b` is formed.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, RecurrentDataset};
use crate::error::{Error, Result};
use crate::kernel::{ArdKernel, Interval};
use crate::linalg::{frob, lower};
use crate::numerics::{
    check_b, expected_log_square_moments, linspace, ln_factorial, simpson, simpson_samples, EULER_GAMMA,
};
use crate::svgp::SparseVariationalGP;

/// Arguments of `ln` below this with a positive count are reported as errors.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub total: f64,
    pub data_term: f64,
    pub integral_term: f64,
    pub kl_term: f64,
    pub constant_term: f64,
}

impl BoundValue {
    fn assemble(data_term: f64, integral_term: f64, kl_term: f64, constant_term: f64) -> Self {
        Self {
            total: data_term - integral_term - kl_term - constant_term,
            data_term,
            integral_term,
            kl_term,
            constant_term,
        }
    }

    /// The part that depends on the parameters.
    pub fn objective(&self) -> f64 {
        self.data_term - self.integral_term - self.kl_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub b: f64,
    pub include_constants: bool,
}

impl BoundConfig {
    pub fn new(b: f64) -> Result<Self> {
        check_b(b)?;
        Ok(Self {
            b,
            include_constants: true,
        })
    }
}

/// Which parameters a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    /// `μ` and the lower triangle of `L`.
    Variational,
    /// `ln γ` and `ln a`.
    Hyper,
    All,
}

/// Gradient of a bound with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGradient {
    pub mu: DVector<f64>,
    /// Lower triangular.
    pub chol_sigma: DMatrix<f64>,
    pub log_variance: f64,
    pub log_lengthscale: f64,
}

impl BoundGradient {
    /// Flattened in the order `μ`, lower-triangular `L` column by column,
    /// `ln γ`, `ln a`, restricted to `wrt`.
    pub fn to_vec(&self, wrt: Wrt) -> Vec<f64> {
        let mut out = Vec::new();
        if wrt != Wrt::Hyper {
            out.extend(pack_variational(&self.mu, &self.chol_sigma));
        }
        if wrt != Wrt::Variational {
            out.push(self.log_variance);
            out.push(self.log_lengthscale);
        }
        out
    }
}

pub(crate) fn pack_variational(mu: &DVector<f64>, l: &DMatrix<f64>) -> Vec<f64> {
    let r = mu.len();
    let mut out = Vec::with_capacity(r + r * (r + 1) / 2);
    out.extend(mu.iter());
    for j in 0..r {
        for i in j..r {
            out.push(l[(i, j)]);
        }
    }
    out
}

pub(crate) fn unpack_variational(x: &[f64], r: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mu = DVector::from_column_slice(&x[..r]);
    let mut l = DMatrix::zeros(r, r);
    let mut k = r;
    for j in 0..r {
        for i in j..r {
            l[(i, j)] = x[k];
            k += 1;
        }
    }
    (mu, l)
}

/// Positions of `diag(L)` inside the packed variational vector.
pub(crate) fn diagonal_positions(r: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(r);
    let mut k = r;
    for j in 0..r {
        out.push(k);
        k += r - j;
    }
    out
}

/// `m ln(rate) − rate − ln m!` with `0 ln 0 = 0`.
pub fn poisson_interval_loglik(rate: f64, count: u64) -> Result<f64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::Domain(format!(
            "Poisson rate must be finite and nonnegative, got {rate}"
        )));
    }
    if count == 0 {
        return Ok(-rate);
    }
    if rate == 0.0 {
        return Err(Error::Domain(format!("zero rate with count {count}")));
    }
    Ok(count as f64 * rate.ln() - rate - ln_factorial(count))
}

/// Panel log-likelihood of an intensity, integrating each interval by
/// Simpson's rule on `quad_points` nodes.
pub fn panel_loglik(intensity: impl Fn(f64) -> f64, data: &PanelDataset, quad_points: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.subjects {
        for r in &s.records {
            let rate = simpson(&intensity, r.interval.start, r.interval.end, quad_points)?;
            total += poisson_interval_loglik(rate.max(0.0), r.count)?;
        }
    }
    Ok(total)
}

/// Interval-level summary of a panel dataset, with duplicate intervals merged.
#[derive(Debug, Clone)]
pub(crate) struct PanelProblem {
    /// Distinct intervals carrying a positive count.
    pub(crate) intervals: Vec<Interval>,
    pub(crate) counts: Vec<f64>,
    pub(crate) windows: Vec<Interval>,
    pub(crate) window_weights: Vec<f64>,
    /// `Σ m ln υ_k`, zero without weights.
    pub(crate) log_weight_term: f64,
    /// `Σ m(C + ln 2) + ln m!`.
    pub(crate) constant: f64,
}

fn key(iv: Interval) -> (u64, u64) {
    (iv.start.to_bits(), iv.end.to_bits())
}

impl PanelProblem {
    pub(crate) fn new(data: &PanelDataset, weights: Option<&[f64]>) -> Result<Self> {
        if let Some(w) = weights {
            if w.len() != data.len() || w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidConfig(
                    "subject weights must be positive, one per subject".into(),
                ));
            }
        }
        let mut intervals = Vec::new();
        let mut counts = Vec::new();
        let mut index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut windows = Vec::new();
        let mut window_weights = Vec::new();
        let mut window_index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut log_weight_term = 0.0;
        let mut constant = 0.0;
        for (k, s) in data.subjects.iter().enumerate() {
            let upsilon = weights.map_or(1.0, |w| w[k]);
            let wi = *window_index.entry(key(s.window)).or_insert_with(|| {
                windows.push(s.window);
                window_weights.push(0.0);
                windows.len() - 1
            });
            window_weights[wi] += upsilon;
            for r in &s.records {
                if r.count == 0 {
                    continue;
                }
                if r.interval.length() <= 0.0 {
                    return Err(Error::InvalidData(format!(
                        "subject {}: zero-length interval at {} has count {}",
                        s.id, r.interval.start, r.count
                    )));
                }
                let m = r.count as f64;
                let ii = *index.entry(key(r.interval)).or_insert_with(|| {
                    intervals.push(r.interval);
                    counts.push(0.0);
                    intervals.len() - 1
                });
                counts[ii] += m;
                log_weight_term += m * upsilon.ln();
                constant += m * (EULER_GAMMA + std::f64::consts::LN_2) + ln_factorial(r.count);
            }
        }
        Ok(Self {
            intervals,
            counts,
            windows,
            window_weights,
            log_weight_term,
            constant,
        })
    }

    /// Ψ for every interval plus the weighted window sum, optionally with
    /// derivatives in `ln a`.
    pub(crate) fn psi_set(&self, gp: &SparseVariationalGP, with_grad: bool) -> PsiSet {
        let layout = &gp.cache().layout;
        let kernel = gp.kernel();
        let mut phis = Vec::with_capacity(self.intervals.len());
        let mut dphis = Vec::new();
        for iv in &self.intervals {
            let (p, d) = layout.matrix(kernel, *iv, with_grad);
            phis.push(p);
            if let Some(d) = d {
                dphis.push(d);
            }
        }
        let r = gp.num_pseudo();
        let mut win = DMatrix::zeros(r, r);
        let mut dwin = DMatrix::zeros(r, r);
        let mut win_len = 0.0;
        for (iv, w) in self.windows.iter().zip(&self.window_weights) {
            let (p, d) = layout.matrix(kernel, *iv, with_grad);
            win += p * *w;
            if let Some(d) = d {
                dwin += d * *w;
            }
            win_len += w * iv.length();
        }
        PsiSet {
            kernel: *kernel,
            phis,
            dphis,
            window: win,
            dwindow: with_grad.then_some(dwin),
            window_length: win_len,
        }
    }
}

/// Ψ matrices for one kernel setting.
#[derive(Debug, Clone)]
pub(crate) struct PsiSet {
    pub(crate) kernel: ArdKernel,
    pub(crate) phis: Vec<DMatrix<f64>>,
    pub(crate) dphis: Vec<DMatrix<f64>>,
    pub(crate) window: DMatrix<f64>,
    pub(crate) dwindow: Option<DMatrix<f64>>,
    /// `Σ_k υ_k |X^(k)|`.
    pub(crate) window_length: f64,
}

/// Quantities shared by the panel and recurrent evaluations.
struct Moments {
    k_inv: DMatrix<f64>,
    alpha: DVector<f64>,
    /// `K⁻¹L`.
    p: DMatrix<f64>,
    /// `K⁻¹ΣK⁻¹`.
    ksk: DMatrix<f64>,
    aat: DMatrix<f64>,
}

impl Moments {
    fn new(gp: &SparseVariationalGP) -> Self {
        let k_inv = gp.cache().k_inv.clone();
        let alpha = gp.alpha().clone();
        let p = &k_inv * gp.chol_sigma();
        let ksk = &p * p.transpose();
        let aat = &alpha * alpha.transpose();
        Self {
            k_inv,
            alpha,
            p,
            ksk,
            aat,
        }
    }

    /// `W_b`.
    fn w(&self, b: f64) -> DMatrix<f64> {
        &self.aat + (&self.ksk - &self.k_inv) * b
    }

    /// `X` such that `⟨Ψ, dW_b⟩ = tr(dK·X)`.
    fn x_adjoint(&self, phi: &DMatrix<f64>, b: f64) -> DMatrix<f64> {
        let q = &self.aat + &self.ksk * b;
        let phik = phi * &self.k_inv;
        (&q * &phik) * -2.0 + (&self.k_inv * &phik) * b
    }
}

/// `∂K/∂ln a` for the pseudo-input Gram matrix.
fn dk_dlog_a(gp: &SparseVariationalGP) -> DMatrix<f64> {
    let z = gp.pseudo_inputs();
    let a2 = gp.kernel().lengthscale().powi(2);
    let k = &gp.cache().k_rr;
    DMatrix::from_fn(z.len(), z.len(), |i, j| k[(i, j)] * (z[i] - z[j]).powi(2) / a2)
}

/// Gradient of the integral and KL terms (the pieces shared by every model),
/// returned already negated as they enter the bound.
fn integral_and_kl_gradient(
    gp: &SparseVariationalGP,
    mo: &Moments,
    window: &DMatrix<f64>,
    dwindow: Option<&DMatrix<f64>>,
    window_length: f64,
    wrt: Wrt,
) -> BoundGradient {
    let r = gp.num_pseudo();
    let l = gp.chol_sigma();
    let mut g_mu = DVector::zeros(r);
    let mut g_l = DMatrix::zeros(r, r);
    if wrt != Wrt::Hyper {
        let kphi = &mo.k_inv * window;
        g_mu = (&kphi * &mo.alpha) * -2.0 - &mo.alpha;
        let mut m = (&kphi * &mo.p) * -2.0 - &mo.p;
        for i in 0..r {
            m[(i, i)] += 1.0 / l[(i, i)];
        }
        g_l = lower(&m);
    }
    let (mut g_var, mut g_len) = (0.0, 0.0);
    if wrt != Wrt::Variational {
        let gamma = gp.kernel().variance();
        let w1 = mo.w(1.0);
        let x_int = mo.x_adjoint(window, 1.0);
        let x_kl = (&mo.k_inv - &mo.ksk - &mo.aat) * 0.5;
        let x = &x_int + &x_kl;
        let k_rr = &gp.cache().k_rr;
        g_var = -(2.0 * frob(window, &w1) + gamma * window_length + frob(k_rr, &x));
        let dka = dk_dlog_a(gp);
        let dphi = dwindow.expect("window derivative requested");
        g_len = -(frob(dphi, &w1) + frob(&dka, &x));
    }
    BoundGradient {
        mu: g_mu,
        chol_sigma: g_l,
        log_variance: g_var,
        log_lengthscale: g_len,
    }
}

/// Bound and optional gradient for a panel problem with precomputed Ψ.
pub(crate) fn panel_eval(
    problem: &PanelProblem,
    gp: &SparseVariationalGP,
    psi: &PsiSet,
    b: f64,
    grad: Option<Wrt>,
) -> Result<(BoundValue, Option<BoundGradient>)> {
    debug_assert_eq!(psi.kernel, *gp.kernel());
    let mo = Moments::new(gp);
    let gamma = gp.kernel().variance();
    let wb = mo.w(b);
    let mut data_term = problem.log_weight_term;
    let mut c = Vec::with_capacity(problem.intervals.len());
    for ((iv, m), phi) in problem.intervals.iter().zip(&problem.counts).zip(&psi.phis) {
        let d = frob(phi, &wb) + b * gamma * iv.length();
        if !(d > LOG_FLOOR) {
            return Err(Error::DegenerateInterval {
                start: iv.start,
                end: iv.end,
                count: *m as u64,
                value: d,
            });
        }
        data_term += m * d.ln();
        c.push(m / d);
    }
    let w1 = mo.w(1.0);
    let integral = (frob(&psi.window, &w1) + gamma * psi.window_length).max(0.0);
    let kl = gp.kl_divergence();
    let value = BoundValue::assemble(data_term, integral, kl, problem.constant);

    let Some(wrt) = grad else {
        return Ok((value, None));
    };
    let mut g = integral_and_kl_gradient(gp, &mo, &psi.window, psi.dwindow.as_ref(), psi.window_length, wrt);
    let r = gp.num_pseudo();
    let mut phibar = DMatrix::zeros(r, r);
    for (ci, phi) in c.iter().zip(&psi.phis) {
        phibar += phi * *ci;
    }
    if wrt != Wrt::Hyper {
        let kphibar = &mo.k_inv * &phibar;
        g.mu += (&kphibar * &mo.alpha) * 2.0;
        g.chol_sigma += lower(&((&kphibar * &mo.p) * (2.0 * b)));
    }
    if wrt != Wrt::Variational {
        let x = mo.x_adjoint(&phibar, b);
        let clen: f64 = c.iter().zip(&problem.intervals).map(|(ci, iv)| ci * iv.length()).sum();
        g.log_variance += 2.0 * frob(&phibar, &wb) + b * gamma * clen + frob(&gp.cache().k_rr, &x);
        let mut dphibar = DMatrix::zeros(r, r);
        for (ci, d) in c.iter().zip(&psi.dphis) {
            dphibar += d * *ci;
        }
        g.log_lengthscale += frob(&dphibar, &wb) + frob(&dk_dlog_a(gp), &x);
    }
    Ok((value, Some(g)))
}

/// The tractable lower bound of the panel-data ELBO.
pub fn gp4c_bound(gp: &SparseVariationalGP, data: &PanelDataset, cfg: BoundConfig) -> Result<BoundValue> {
    weighted_bound(gp, data, None, cfg)
}

/// The bound with per-subject multiplicative weights on the intensity.
pub fn weighted_bound(
    gp: &SparseVariationalGP,
    data: &PanelDataset,
    weights: Option<&[f64]>,
    cfg: BoundConfig,
) -> Result<BoundValue> {
    check_b(cfg.b)?;
    let problem = PanelProblem::new(data, weights)?;
    let psi = problem.psi_set(gp, false);
    let (v, _) = panel_eval(&problem, gp, &psi, cfg.b, None)?;
    Ok(strip_constants(v, cfg))
}

fn strip_constants(v: BoundValue, cfg: BoundConfig) -> BoundValue {
    if cfg.include_constants {
        v
    } else {
        BoundValue::assemble(v.data_term, v.integral_term, v.kl_term, 0.0)
    }
}

pub fn gp4c_bound_gradient(
    gp: &SparseVariationalGP,
    data: &PanelDataset,
    cfg: BoundConfig,
    wrt: Wrt,
) -> Result<Vec<f64>> {
    Ok(weighted_bound_gradient(gp, data, None, cfg)?.to_vec(wrt))
}

pub fn weighted_bound_gradient(
    gp: &SparseVariationalGP,
    data: &PanelDataset,
    weights: Option<&[f64]>,
    cfg: BoundConfig,
) -> Result<BoundGradient> {
    check_b(cfg.b)?;
    let problem = PanelProblem::new(data, weights)?;
    let psi = problem.psi_set(gp, true);
    let (_, g) = panel_eval(&problem, gp, &psi, cfg.b, Some(Wrt::All))?;
    Ok(g.expect("gradient requested"))
}

/// Event-level summary of a recurrent dataset.
#[derive(Debug, Clone)]
pub(crate) struct RecurrentProblem {
    pub(crate) events: Vec<f64>,
    pub(crate) windows: Vec<Interval>,
    pub(crate) window_weights: Vec<f64>,
}

impl RecurrentProblem {
    pub(crate) fn new(data: &RecurrentDataset) -> Self {
        let mut windows = Vec::new();
        let mut window_weights = Vec::new();
        let mut index: HashMap<(u64, u64), usize> = HashMap::new();
        let mut events = Vec::with_capacity(data.num_events());
        for s in &data.subjects {
            let wi = *index.entry(key(s.window)).or_insert_with(|| {
                windows.push(s.window);
                window_weights.push(0.0);
                windows.len() - 1
            });
            window_weights[wi] += 1.0;
            events.extend_from_slice(&s.timestamps);
        }
        Self {
            events,
            windows,
            window_weights,
        }
    }

    pub(crate) fn window_psi(&self, gp: &SparseVariationalGP, with_grad: bool) -> PsiSet {
        let as_panel = PanelProblem {
            intervals: Vec::new(),
            counts: Vec::new(),
            windows: self.windows.clone(),
            window_weights: self.window_weights.clone(),
            log_weight_term: 0.0,
            constant: 0.0,
        };
        as_panel.psi_set(gp, with_grad)
    }

    /// Cross-covariances between pseudo inputs and events.
    pub(crate) fn event_cache(&self, gp: &SparseVariationalGP, with_grad: bool) -> EventCache {
        let kx = gp.kernel().gram(gp.pseudo_inputs(), &self.events);
        let a = &gp.cache().k_inv * &kx;
        let dkx = with_grad.then(|| {
            let z = gp.pseudo_inputs();
            let a2 = gp.kernel().lengthscale().powi(2);
            DMatrix::from_fn(kx.nrows(), kx.ncols(), |i, j| {
                kx[(i, j)] * (z[i] - self.events[j]).powi(2) / a2
            })
        });
        EventCache { kx, a, dkx }
    }
}

pub(crate) struct EventCache {
    kx: DMatrix<f64>,
    /// `K⁻¹ K_Rx`.
    a: DMatrix<f64>,
    dkx: Option<DMatrix<f64>>,
}

pub(crate) fn recurrent_eval(
    problem: &RecurrentProblem,
    gp: &SparseVariationalGP,
    psi: &PsiSet,
    ev: &EventCache,
    grad: Option<Wrt>,
) -> Result<(BoundValue, Option<BoundGradient>)> {
    let mo = Moments::new(gp);
    let gamma = gp.kernel().variance();
    let n = problem.events.len();
    let lta = gp.chol_sigma().transpose() * &ev.a;
    let mut data_term = 0.0;
    let mut f_m = Vec::with_capacity(n);
    let mut f_s = Vec::with_capacity(n);
    for j in 0..n {
        let mean = ev.a.column(j).dot(gp.mu());
        let var = gamma - ev.kx.column(j).dot(&ev.a.column(j)) + lta.column(j).norm_squared();
        if !(var > 1e-12 * gamma) {
            if var < -1e-9 * gamma.max(1.0) {
                return Err(Error::NegativeVariance(var));
            }
            return Err(Error::DegenerateInterval {
                start: problem.events[j],
                end: problem.events[j],
                count: 1,
                value: var,
            });
        }
        let (v, dm, ds) = expected_log_square_moments(mean, var);
        data_term += v;
        f_m.push(dm);
        f_s.push(ds);
    }
    let w1 = mo.w(1.0);
    let integral = (frob(&psi.window, &w1) + gamma * psi.window_length).max(0.0);
    let kl = gp.kl_divergence();
    let value = BoundValue::assemble(data_term, integral, kl, 0.0);
    let Some(wrt) = grad else {
        return Ok((value, None));
    };
    let mut g = integral_and_kl_gradient(gp, &mo, &psi.window, psi.dwindow.as_ref(), psi.window_length, wrt);
    let r = gp.num_pseudo();
    // A·diag(F_s) and A·F_m
    let mut a_fs = ev.a.clone();
    for (j, s) in f_s.iter().enumerate() {
        a_fs.column_mut(j).scale_mut(*s);
    }
    let a_fm = &ev.a * DVector::from_vec(f_m.clone());
    let afa = &a_fs * ev.a.transpose();
    if wrt != Wrt::Hyper {
        g.mu += &a_fm;
        g.chol_sigma += lower(&((&afa * gp.chol_sigma()) * 2.0));
    }
    if wrt != Wrt::Variational {
        let b_mat = &mo.ksk * &ev.kx;
        // Adjoint of k_j: F_m α + F_s (2B_j − 2A_j)
        let mut gk = (&b_mat - &ev.a) * 2.0;
        for (j, s) in f_s.iter().enumerate() {
            gk.column_mut(j).scale_mut(*s);
        }
        for (j, m) in f_m.iter().enumerate() {
            gk.column_mut(j).axpy(*m, &mo.alpha, 1.0);
        }
        let x = (&mo.alpha * a_fm.transpose()) * -1.0 + &afa - (&a_fs * b_mat.transpose()) * 2.0;
        let x = (&x + x.transpose()) * 0.5;
        let sum_fs: f64 = f_s.iter().sum();
        g.log_variance += frob(&ev.kx, &gk) + frob(&gp.cache().k_rr, &x) + gamma * sum_fs;
        let dkx = ev.dkx.as_ref().expect("event derivatives requested");
        g.log_lengthscale += frob(dkx, &gk) + frob(&dk_dlog_a(gp), &x);
    }
    debug_assert_eq!(g.mu.len(), r);
    Ok((value, Some(g)))
}

/// ELBO for fully observed event times, with each event's expected log
/// intensity taken exactly.
pub fn gp3_elbo(gp: &SparseVariationalGP, data: &RecurrentDataset) -> Result<BoundValue> {
    let problem = RecurrentProblem::new(data);
    let psi = problem.window_psi(gp, false);
    let ev = problem.event_cache(gp, false);
    Ok(recurrent_eval(&problem, gp, &psi, &ev, None)?.0)
}

pub fn gp3_elbo_gradient(gp: &SparseVariationalGP, data: &RecurrentDataset) -> Result<BoundGradient> {
    let problem = RecurrentProblem::new(data);
    let psi = problem.window_psi(gp, true);
    let ev = problem.event_cache(gp, true);
    Ok(recurrent_eval(&problem, gp, &psi, &ev, Some(Wrt::All))?
        .1
        .expect("gradient requested"))
}

/// Monte-Carlo estimate of the panel ELBO.
///
/// Each distinct interval with a positive count gets its own batch of joint
/// draws of `f` on `grid_points` Simpson nodes; the expected log integrals
/// are averaged per interval and their variances add up in the standard
/// error. All other terms are analytic. Returns `(estimate, std_error)`.
pub fn mc_elbo(
    gp: &SparseVariationalGP,
    data: &PanelDataset,
    samples: usize,
    grid_points: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::Domain("mc_elbo needs at least 2 samples".into()));
    }
    crate::numerics::check_simpson_points(grid_points)?;
    let problem = PanelProblem::new(data, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimate = 0.0;
    let mut variance = 0.0;
    let mut log_fact = 0.0;
    for s in &data.subjects {
        for r in &s.records {
            log_fact += ln_factorial(r.count);
        }
    }
    for (iv, m) in problem.intervals.iter().zip(&problem.counts) {
        let grid = linspace(iv.start, iv.end, grid_points);
        let h = iv.length() / (grid_points - 1) as f64;
        let sampler = gp.path_sampler(&grid)?;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            let f = sampler.sample(&mut rng);
            let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
            let integral = simpson_samples(&sq, h);
            if !(integral > 0.0) {
                return Err(Error::DegenerateInterval {
                    start: iv.start,
                    end: iv.end,
                    count: *m as u64,
                    value: integral,
                });
            }
            let v = integral.ln();
            sum += v;
            sum_sq += v * v;
        }
        let n = samples as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        estimate += m * mean;
        variance += m * m * var / n;
    }
    let mut integral = 0.0;
    for s in &data.subjects {
        integral += gp.integrated_second_moment(s.window)?;
    }
    let total = estimate - integral - gp.kl_divergence() - log_fact;
    Ok((total, variance.sqrt()))
}

#[cfg(test)]
/// Rebuilds a state from a flattened `[μ, L, ln γ, ln a]` vector.
pub(crate) fn gp_from_params(template: &SparseVariationalGP, x: &[f64]) -> Result<SparseVariationalGP> {
    let r = template.num_pseudo();
    let nv = r + r * (r + 1) / 2;
    let (mu, l) = unpack_variational(&x[..nv], r);
    let kernel = ArdKernel::new(x[nv].exp(), x[nv + 1].exp())?;
    SparseVariationalGP::new(template.pseudo_inputs().to_vec(), mu, l, kernel, template.jitter())
}

#[cfg(test)]
pub(crate) fn params_of(gp: &SparseVariationalGP) -> Vec<f64> {
    let mut x = pack_variational(gp.mu(), gp.chol_sigma());
    x.push(gp.kernel().variance().ln());
    x.push(gp.kernel().lengthscale().ln());
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{censor_to_panel, sample_ipp, IntensitySpec, PanelRecord, PanelSubject, RecurrentSubject};
    use crate::numerics::{digamma, expected_log_square, g_gap};
    use rand::Rng;
    use std::f64::consts::LN_2;

    fn random_gp(rng: &mut ChaCha8Rng, r: usize, domain: (f64, f64)) -> SparseVariationalGP {
        let kernel = ArdKernel::new(rng.random_range(0.5..3.0), rng.random_range(0.8..3.0)).unwrap();
        let z = linspace(domain.0, domain.1, r);
        let mu = DVector::from_fn(r, |_, _| rng.random_range(-1.5..1.5));
        let l = DMatrix::from_fn(r, r, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-0.2..0.2),
            std::cmp::Ordering::Equal => rng.random_range(0.2..0.8),
            std::cmp::Ordering::Less => 0.0,
        });
        SparseVariationalGP::new(z, mu, l, kernel, 1e-6).unwrap()
    }

    fn random_panel(rng: &mut ChaCha8Rng, subjects: usize, intervals: usize, t: f64) -> PanelDataset {
        let w = Interval::new(0.0, t).unwrap();
        let spec = IntensitySpec::Constant {
            value: rng.random_range(0.5..3.0),
        };
        let subs = (0..subjects)
            .map(|k| {
                let ev = sample_ipp(&spec, w, rng.random());
                censor_to_panel(format!("s{k}"), &ev, w, &vec![1.0; intervals], rng.random()).unwrap()
            })
            .collect();
        PanelDataset::new(subs).unwrap()
    }

    fn one_interval(s: f64, e: f64, m: u64) -> PanelDataset {
        PanelDataset::new(vec![PanelSubject::new(
            "a",
            vec![PanelRecord {
                interval: Interval::new(s, e).unwrap(),
                count: m,
            }],
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_interval_loglik(1.0, 0).unwrap() + 1.0).abs() < 1e-15);
        assert!((poisson_interval_loglik(1.0, 1).unwrap() + 1.0).abs() < 1e-15);
        let total: f64 = (0..=60).map(|m| poisson_interval_loglik(3.7, m).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let direct = 5.0 * 3.7f64.ln() - 3.7 - 120f64.ln();
        assert!((poisson_interval_loglik(3.7, 5).unwrap() - direct).abs() < 1e-12);
        assert_eq!(poisson_interval_loglik(0.0, 0).unwrap(), 0.0);
        assert!(poisson_interval_loglik(0.0, 2).is_err());
    }

    #[test]
    fn panel_loglik_examples() {
        let d = one_interval(0.0, 4.0, 9);
        let v = panel_loglik(|_| 2.5, &d, 11).unwrap();
        let expected = 9.0 * 10f64.ln() - 10.0 - ln_factorial(9);
        assert!((v - expected).abs() < 1e-12);
        assert_eq!(panel_loglik(|_| 1.0, &PanelDataset::default(), 11).unwrap(), 0.0);
    }

    #[test]
    fn panel_loglik_square_wave_matches_rectangle_oracle() {
        let w = Interval::new(0.0, 60.0).unwrap();
        let h1 = IntensitySpec::h1();
        let subs = (0..3)
            .map(|k| censor_to_panel(format!("s{k}"), &sample_ipp(&h1, w, k), w, &[1.0; 10], 50 + k).unwrap())
            .collect();
        let data = PanelDataset::new(subs).unwrap();
        let got = panel_loglik(|x| h1.eval(x), &data, 1_000_001).unwrap();
        let mut oracle = 0.0;
        for s in &data.subjects {
            for r in &s.records {
                let n = 1_000_000;
                let h = r.interval.length() / n as f64;
                let rate: f64 = (0..n)
                    .map(|i| h1.eval(r.interval.start + (i as f64 + 0.5) * h))
                    .sum::<f64>()
                    * h;
                oracle += poisson_interval_loglik(rate, r.count).unwrap();
            }
        }
        assert!((got - oracle).abs() < 1e-6 * oracle.abs(), "{got} vs {oracle}");
    }

    #[test]
    fn zero_counts_leave_only_integral_and_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gp = random_gp(&mut rng, 5, (0.0, 10.0));
        let d = one_interval(0.0, 10.0, 0);
        let v = gp4c_bound(&gp, &d, BoundConfig::new(0.3).unwrap()).unwrap();
        assert_eq!(v.data_term, 0.0);
        assert_eq!(v.constant_term, 0.0);
        assert!((v.total + v.integral_term + v.kl_term).abs() < 1e-12);
    }

    #[test]
    fn single_interval_prior_is_compositional() {
        let kernel = ArdKernel::new(1.3, 2.0).unwrap();
        let gp = SparseVariationalGP::prior(linspace(0.0, 10.0, 6), kernel, 1e-6).unwrap();
        let iv = Interval::new(2.0, 5.5).unwrap();
        let d = one_interval(2.0, 5.5, 4);
        let b = 0.3;
        let v = gp4c_bound(&gp, &d, BoundConfig::new(b).unwrap()).unwrap();
        let (sq, var) = gp.integrated_sqmean_and_var(iv).unwrap();
        assert!((v.data_term - 4.0 * (sq + b * var).ln()).abs() < 1e-10);
        assert!((v.integral_term - gp.integrated_second_moment(iv).unwrap()).abs() < 1e-10);
        assert!((v.kl_term - gp.kl_divergence()).abs() < 1e-12);
        let c = 4.0 * (EULER_GAMMA + LN_2) + 24f64.ln();
        assert!((v.constant_term - c).abs() < 1e-12);
        assert!((v.total - (v.data_term - v.integral_term - v.kl_term - v.constant_term)).abs() < 1e-10);
        let no_const = gp4c_bound(
            &gp,
            &d,
            BoundConfig {
                b,
                include_constants: false,
            },
        )
        .unwrap();
        assert_eq!(no_const.constant_term, 0.0);
        assert_eq!(no_const.objective(), v.objective());
    }

    #[test]
    fn duplicate_intervals_are_merged_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gp = random_gp(&mut rng, 5, (0.0, 10.0));
        let rec = |s: f64, e: f64, c: u64| PanelRecord {
            interval: Interval::new(s, e).unwrap(),
            count: c,
        };
        let subs = vec![
            PanelSubject::new("a", vec![rec(0.0, 4.0, 3), rec(4.0, 10.0, 5)]).unwrap(),
            PanelSubject::new("b", vec![rec(0.0, 4.0, 2), rec(4.0, 10.0, 0)]).unwrap(),
        ];
        let data = PanelDataset::new(subs).unwrap();
        let problem = PanelProblem::new(&data, None).unwrap();
        assert_eq!(problem.intervals.len(), 2);
        assert_eq!(problem.windows.len(), 1);
        let v = gp4c_bound(&gp, &data, BoundConfig::new(0.3).unwrap()).unwrap();
        let mut manual = 0.0;
        for s in &data.subjects {
            for r in &s.records {
                if r.count > 0 {
                    let (a, b) = gp.integrated_sqmean_and_var(r.interval).unwrap();
                    manual += r.count as f64 * (a + 0.3 * b).ln();
                }
            }
        }
        assert!((v.data_term - manual).abs() < 1e-10);
        let integral: f64 = data
            .subjects
            .iter()
            .map(|s| gp.integrated_second_moment(s.window).unwrap())
            .sum();
        assert!((v.integral_term - integral).abs() < 1e-10);
    }

    #[test]
    fn data_term_is_monotone_in_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gp = random_gp(&mut rng, 6, (0.0, 20.0));
        let data = random_panel(&mut rng, 3, 5, 20.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=20 {
            let b = i as f64 / 20.0;
            let v = gp4c_bound(&gp, &data, BoundConfig::new(b).unwrap()).unwrap();
            assert!(v.data_term >= prev - 1e-12);
            prev = v.data_term;
        }
    }

    #[test]
    fn degenerate_interval_is_an_error() {
        let kernel = ArdKernel::new(1.0, 1.0).unwrap();
        let gp = SparseVariationalGP::prior(linspace(0.0, 5.0, 4), kernel, 1e-6).unwrap();
        let d = one_interval(1.0, 2.0, 3);
        assert!(matches!(
            gp4c_bound(&gp, &d, BoundConfig::new(0.0).unwrap()),
            Err(Error::DegenerateInterval { count: 3, .. })
        ));
        assert!(BoundConfig::new(1.5).is_err());
    }

    #[test]
    fn exactness_chain_on_a_narrow_interval() {
        let kernel = ArdKernel::new(1.0, 1.0).unwrap();
        let mu0 = 0.8;
        let sd0 = 0.5;
        let gp = SparseVariationalGP::new(
            vec![3.0],
            DVector::from_vec(vec![mu0]),
            DMatrix::from_element(1, 1, sd0),
            kernel,
            1e-6,
        )
        .unwrap();
        let width = 1e-3;
        let d = one_interval(3.0 - width / 2.0, 3.0 + width / 2.0, 2);
        for b in [0.0, 0.3, 1.0] {
            let v = gp4c_bound(&gp, &d, BoundConfig::new(b).unwrap()).unwrap();
            let target = 2.0 * ((mu0 * mu0 + b * sd0 * sd0).ln() + width.ln());
            assert!(
                (v.data_term - target).abs() < 1e-4,
                "b={b}: {} vs {target}",
                v.data_term
            );
            let lhs = v.data_term / 2.0 - width.ln() - EULER_GAMMA - LN_2;
            let exact = expected_log_square(mu0, sd0).unwrap();
            assert!(lhs <= exact + 1e-4);
        }
    }

    fn check_fd(label: &str, analytic: &[f64], x: &[f64], mut f: impl FnMut(&[f64]) -> f64) {
        for i in 0..x.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            let mut up = x.to_vec();
            up[i] += h;
            let mut dn = x.to_vec();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let tol = 1e-5f64.max(1e-4 * fd.abs());
            assert!(
                (analytic[i] - fd).abs() <= tol,
                "{label} component {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn panel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for case in 0..20 {
            let r = rng.random_range(2..7);
            let gp = random_gp(&mut rng, r, (0.0, 12.0));
            let (ns, ni) = (rng.random_range(1..5), rng.random_range(1..6));
            let data = random_panel(&mut rng, ns, ni, 12.0);
            let b = [0.0, 0.3, 1.0][case % 3];
            let cfg = BoundConfig::new(b).unwrap();
            let weights: Option<Vec<f64>> =
                (case % 2 == 1).then(|| (0..data.len()).map(|_| rng.random_range(0.5..2.0)).collect());
            let g = weighted_bound_gradient(&gp, &data, weights.as_deref(), cfg)
                .unwrap()
                .to_vec(Wrt::All);
            let x = params_of(&gp);
            check_fd(&format!("case {case}"), &g, &x, |p| {
                let gp = gp_from_params(&gp, p).unwrap();
                weighted_bound(&gp, &data, weights.as_deref(), cfg).unwrap().total
            });
            let gv = gp4c_bound_gradient(&gp, &data, cfg, Wrt::Variational).unwrap();
            let gh = gp4c_bound_gradient(&gp, &data, cfg, Wrt::Hyper).unwrap();
            assert_eq!(gv.len() + gh.len(), x.len());
        }
    }

    #[test]
    fn gp3_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        for case in 0..10 {
            let r = rng.random_range(2..7);
            let gp = random_gp(&mut rng, r, (0.0, 8.0));
            let w = Interval::new(0.0, 8.0).unwrap();
            let spec = IntensitySpec::Constant {
                value: rng.random_range(0.3..2.0),
            };
            let data = RecurrentDataset {
                subjects: (0..3)
                    .map(|k| RecurrentSubject::new(format!("s{k}"), w, sample_ipp(&spec, w, rng.random())).unwrap())
                    .collect(),
            };
            let g = gp3_elbo_gradient(&gp, &data).unwrap().to_vec(Wrt::All);
            let x = params_of(&gp);
            check_fd(&format!("case {case}"), &g, &x, |p| {
                gp3_elbo(&gp_from_params(&gp, p).unwrap(), &data).unwrap().total
            });
        }
    }

    #[test]
    fn gp3_examples() {
        let kernel = ArdKernel::new(1.7, 1.0).unwrap();
        let gp = SparseVariationalGP::prior(linspace(0.0, 6.0, 7), kernel, 1e-6).unwrap();
        let w = Interval::new(0.0, 6.0).unwrap();
        let empty = RecurrentDataset {
            subjects: vec![RecurrentSubject::new("a", w, vec![]).unwrap()],
        };
        let v = gp3_elbo(&gp, &empty).unwrap();
        assert_eq!(v.data_term, 0.0);
        assert!((v.total + v.integral_term + v.kl_term).abs() < 1e-12);

        let one = RecurrentDataset {
            subjects: vec![RecurrentSubject::new("a", w, vec![2.5]).unwrap()],
        };
        let v = gp3_elbo(&gp, &one).unwrap();
        let expected = (2.0 * 1.7f64).ln() + digamma(0.5).unwrap() - 1.7 * 6.0;
        assert!((v.total - expected).abs() < 1e-6, "{} vs {expected}", v.total);
    }

    #[test]
    fn gp3_data_term_agrees_with_gap_function_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gp = random_gp(&mut rng, 5, (0.0, 10.0));
        let events = vec![0.4, 2.2, 5.0, 9.1];
        let data = RecurrentDataset {
            subjects: vec![RecurrentSubject::new("a", Interval::new(0.0, 10.0).unwrap(), events.clone()).unwrap()],
        };
        let v = gp3_elbo(&gp, &data).unwrap();
        let mut via_g = 0.0;
        for x in events {
            let (m, s2) = gp.posterior_moments_at(x).unwrap();
            // E ln f² = ln(2σ²) − G(−φ/2) − 2 ln 2 − C with φ = m²/σ².
            via_g += (2.0 * s2).ln() - g_gap(-0.5 * m * m / s2).unwrap() - 2.0 * LN_2 - EULER_GAMMA;
        }
        assert!((v.data_term - via_g).abs() < 1e-10);
    }

    #[test]
    fn gp3_elbo_below_importance_sampled_evidence() {
        let kernel = ArdKernel::new(1.0, 0.7).unwrap();
        let w = Interval::new(0.0, 1.0).unwrap();
        let events = vec![0.3, 0.75];
        let data = RecurrentDataset {
            subjects: vec![RecurrentSubject::new("a", w, events.clone()).unwrap()],
        };
        let z = linspace(0.0, 1.0, 4);
        let prior = SparseVariationalGP::prior(z.clone(), kernel, 1e-6).unwrap();
        // Evidence by sampling f from the prior: E_p[Π f²(x_j) exp(−∫ f²)].
        let mut grid = linspace(0.0, 1.0, 201);
        grid.extend(&events);
        let sampler = prior.path_sampler(&grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let logs: Vec<f64> = (0..n)
            .map(|_| {
                let f = sampler.sample(&mut rng);
                let sq: Vec<f64> = f[..201].iter().map(|v| v * v).collect();
                let integral = simpson_samples(&sq, 1.0 / 200.0);
                f[201..].iter().map(|v| (v * v).ln()).sum::<f64>() - integral
            })
            .collect();
        let lse = crate::numerics::log_sum_exp(&logs) - (n as f64).ln();
        let weights: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let var = weights.iter().map(|w| (w - 1.0).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let candidates = [
            prior.clone(),
            prior
                .with_variational(DVector::from_element(4, 0.8), DMatrix::identity(4, 4) * 0.3)
                .unwrap(),
        ];
        for gp in candidates {
            let elbo = gp3_elbo(&gp, &data).unwrap().total;
            assert!(elbo <= lse + 3.0 * se, "{elbo} vs {lse} ± {se}");
        }
    }

    #[test]
    fn bound_is_below_monte_carlo_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..3 {
            let r = rng.random_range(2..6);
            let gp = random_gp(&mut rng, r, (0.0, 6.0));
            let data = random_panel(&mut rng, 2, 4, 6.0);
            let (mc, se) = mc_elbo(&gp, &data, 20_000, 21, 9).unwrap();
            for b in [0.0, 0.3, 1.0] {
                let v = gp4c_bound(&gp, &data, BoundConfig::new(b).unwrap()).unwrap();
                assert!(v.total <= mc + 3.0 * se, "b={b}: {} vs {mc} ± {se}", v.total);
            }
        }
    }

    #[test]
    fn mc_elbo_zero_counts_is_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gp = random_gp(&mut rng, 4, (0.0, 5.0));
        let d = one_interval(0.0, 5.0, 0);
        let (mc, se) = mc_elbo(&gp, &d, 100, 11, 1).unwrap();
        let v = gp4c_bound(&gp, &d, BoundConfig::new(0.3).unwrap()).unwrap();
        assert_eq!(se, 0.0);
        assert!((mc - v.total).abs() < 1e-10);
    }

    #[test]
    fn mc_elbo_degenerate_q_matches_plug_in() {
        let kernel = ArdKernel::new(1.0, 2.0).unwrap();
        let z = linspace(0.0, 8.0, 6);
        let base = SparseVariationalGP::prior(z, kernel, 1e-6).unwrap();
        let mu = DVector::from_vec(vec![1.0, 1.5, 0.8, 1.2, 2.0, 1.1]);
        let gp = base.with_variational(mu, DMatrix::identity(6, 6) * 1e-5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_panel(&mut rng, 2, 4, 8.0);
        let (mc, _) = mc_elbo(&gp, &data, 200, 101, 3).unwrap();
        // Plug-in panel likelihood of mean² plus the analytic variance and KL corrections.
        let mean_sq = |x: f64| gp.posterior_moments_at(x).unwrap().0.powi(2);
        let plug = panel_loglik(mean_sq, &data, 101).unwrap();
        let var_mass: f64 = data
            .subjects
            .iter()
            .map(|s| gp.integrated_sqmean_and_var(s.window).unwrap().1)
            .sum();
        let expected = plug - var_mass - gp.kl_divergence();
        // The residual conditional variance of f is O(jitter · counts / rate).
        assert!(
            (mc - expected).abs() < 1e-3 * expected.abs().max(1.0),
            "{mc} vs {expected}"
        );
    }
}
