//! Sparse variational GP over pseudo inputs and the Gaussian moments of `f`
//! that the bounds consume.
//!
//! With `K = K_RR + εI`, `q(f_R) = N(μ, LLᵀ)` and a zero prior mean, the
//! marginal of `f(x)` under `q` has
//!
//! ```text
//! mean     = k_xᵀ K⁻¹ μ
//! variance = κ(x,x) − k_xᵀ K⁻¹ k_x + k_xᵀ K⁻¹ Σ K⁻¹ k_x
//! ```
//!
//! and integrating `mean² + variance` over an interval replaces `k_x k_xᵀ` by Ψ.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{ArdKernel, Interval, PsiLayout};
use crate::linalg::{frob, jittered_cholesky, pivoted_cholesky_with};

pub const DEFAULT_JITTER: f64 = 1e-6;

/// Negative variances down to this magnitude (times `max(1, γ)`) are treated
/// as roundoff and clamped to zero.
const CLAMP_THRESHOLD: f64 = 1e-9;

/// Relative diagonal tolerance for the low-rank factor used in sampling.
const SAMPLING_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SparseVariationalGP {
    pseudo_inputs: Vec<f64>,
    mu: DVector<f64>,
    chol_sigma: DMatrix<f64>,
    kernel: ArdKernel,
    jitter: f64,
    cache: KernelCache,
    alpha: DVector<f64>,
}

/// Everything that depends only on the kernel and the pseudo inputs.
#[derive(Debug, Clone)]
pub(crate) struct KernelCache {
    /// `K_RR` without jitter.
    pub(crate) k_rr: DMatrix<f64>,
    pub(crate) chol: Cholesky<f64, Dyn>,
    pub(crate) k_inv: DMatrix<f64>,
    pub(crate) layout: PsiLayout,
}

impl KernelCache {
    pub(crate) fn new(pseudo: &[f64], kernel: &ArdKernel, jitter: f64) -> Result<Self> {
        let k_rr = kernel.gram(pseudo, pseudo);
        let chol = jittered_cholesky(&k_rr, jitter)?;
        let mut k_inv = chol.inverse();
        k_inv = (&k_inv + k_inv.transpose()) * 0.5;
        Ok(Self {
            k_rr,
            chol,
            k_inv,
            layout: PsiLayout::new(pseudo),
        })
    }

    pub(crate) fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

impl SparseVariationalGP {
    pub fn new(
        pseudo_inputs: Vec<f64>,
        mu: DVector<f64>,
        chol_sigma: DMatrix<f64>,
        kernel: ArdKernel,
        jitter: f64,
    ) -> Result<Self> {
        let r = pseudo_inputs.len();
        if r == 0 {
            return Err(Error::Domain("at least one pseudo input is required".into()));
        }
        if pseudo_inputs.iter().any(|z| !z.is_finite()) || pseudo_inputs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "pseudo inputs must be finite and strictly increasing".into(),
            ));
        }
        if !(jitter > 0.0) {
            return Err(Error::Domain(format!("jitter must be positive, got {jitter}")));
        }
        let cache = KernelCache::new(&pseudo_inputs, &kernel, jitter)?;
        Self::assemble(pseudo_inputs, mu, chol_sigma, kernel, jitter, cache)
    }

    /// `q` equal to the prior: `μ = 0`, `Σ = K_RR + εI`.
    pub fn prior(pseudo_inputs: Vec<f64>, kernel: ArdKernel, jitter: f64) -> Result<Self> {
        let r = pseudo_inputs.len();
        let gp = Self::new(
            pseudo_inputs,
            DVector::zeros(r),
            DMatrix::identity(r, r),
            kernel,
            jitter,
        )?;
        let l = gp.cache.chol.l();
        gp.with_variational(DVector::zeros(r), l)
    }

    fn assemble(
        pseudo_inputs: Vec<f64>,
        mu: DVector<f64>,
        chol_sigma: DMatrix<f64>,
        kernel: ArdKernel,
        jitter: f64,
        cache: KernelCache,
    ) -> Result<Self> {
        let r = pseudo_inputs.len();
        if mu.len() != r || chol_sigma.shape() != (r, r) {
            return Err(Error::Domain(format!(
                "variational parameters have shape mu {} and L {:?}, expected {r}",
                mu.len(),
                chol_sigma.shape()
            )));
        }
        if mu.iter().chain(chol_sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("variational parameters must be finite".into()));
        }
        for j in 0..r {
            if !(chol_sigma[(j, j)] > 0.0) {
                return Err(Error::Domain(format!(
                    "diagonal of L must be positive, entry {j} is {}",
                    chol_sigma[(j, j)]
                )));
            }
            for i in 0..j {
                if chol_sigma[(i, j)] != 0.0 {
                    return Err(Error::Domain("L must be lower triangular".into()));
                }
            }
        }
        let alpha = &cache.k_inv * &mu;
        Ok(Self {
            pseudo_inputs,
            mu,
            chol_sigma,
            kernel,
            jitter,
            cache,
            alpha,
        })
    }

    /// Same kernel and pseudo inputs, new `q`. Reuses the kernel factorization.
    pub fn with_variational(&self, mu: DVector<f64>, chol_sigma: DMatrix<f64>) -> Result<Self> {
        Self::assemble(
            self.pseudo_inputs.clone(),
            mu,
            chol_sigma,
            self.kernel,
            self.jitter,
            self.cache.clone(),
        )
    }

    /// Same `q`, new kernel hyperparameters.
    pub fn with_kernel(&self, kernel: ArdKernel) -> Result<Self> {
        Self::new(
            self.pseudo_inputs.clone(),
            self.mu.clone(),
            self.chol_sigma.clone(),
            kernel,
            self.jitter,
        )
    }

    pub fn pseudo_inputs(&self) -> &[f64] {
        &self.pseudo_inputs
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn chol_sigma(&self) -> &DMatrix<f64> {
        &self.chol_sigma
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        &self.chol_sigma * self.chol_sigma.transpose()
    }

    pub fn kernel(&self) -> &ArdKernel {
        &self.kernel
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn num_pseudo(&self) -> usize {
        self.pseudo_inputs.len()
    }

    pub(crate) fn cache(&self) -> &KernelCache {
        &self.cache
    }

    /// `K⁻¹ μ`.
    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `K⁻¹ Σ K⁻¹ − K⁻¹`, the matrix that turns `k_x k_x'ᵀ` into the
    /// posterior covariance correction.
    fn covariance_correction(&self) -> DMatrix<f64> {
        let ki = &self.cache.k_inv;
        let kil = ki * &self.chol_sigma;
        &kil * kil.transpose() - ki
    }

    pub fn posterior_moments_at(&self, x: f64) -> Result<(f64, f64)> {
        Ok(self.posterior_moments(&[x])?[0])
    }

    /// Pointwise marginal mean and variance of `f` at every `x`.
    pub fn posterior_moments(&self, xs: &[f64]) -> Result<Vec<(f64, f64)>> {
        let kx = self.kernel.gram(&self.pseudo_inputs, xs);
        let a = &self.cache.k_inv * &kx;
        let lta = self.chol_sigma.transpose() * &a;
        let gamma = self.kernel.variance();
        let mut out = Vec::with_capacity(xs.len());
        for j in 0..xs.len() {
            let mean = a.column(j).dot(&self.mu);
            let var = gamma - kx.column(j).dot(&a.column(j)) + lta.column(j).norm_squared();
            out.push((mean, clamp_variance(var, gamma)?));
        }
        Ok(out)
    }

    /// Joint posterior covariance of `f` on `xs`.
    pub fn posterior_covariance(&self, xs: &[f64]) -> DMatrix<f64> {
        let kx = self.kernel.gram(&self.pseudo_inputs, xs);
        let corr = self.covariance_correction();
        let mut c = self.kernel.gram(xs, xs) + kx.transpose() * corr * &kx;
        c = (&c + c.transpose()) * 0.5;
        c
    }

    /// Ψ over `iv` for the current kernel.
    pub(crate) fn psi(&self, iv: Interval) -> DMatrix<f64> {
        self.cache.layout.matrix(&self.kernel, iv, false).0
    }

    /// `E_q ∫_iv f(x)² dx`.
    pub fn integrated_second_moment(&self, iv: Interval) -> Result<f64> {
        let (m, v) = self.integrated_sqmean_and_var(iv)?;
        Ok(m + v)
    }

    /// `(∫ mean², ∫ variance)` over `iv`.
    pub fn integrated_sqmean_and_var(&self, iv: Interval) -> Result<(f64, f64)> {
        let phi = self.psi(iv);
        let sq_mean = self.alpha.dot(&(&phi * &self.alpha));
        let var = self.kernel.variance() * iv.length() + frob(&phi, &self.covariance_correction());
        let scale = self.kernel.variance() * iv.length().max(1.0);
        Ok((clamp_variance(sq_mean, scale)?, clamp_variance(var, scale)?))
    }

    /// `KL(q(f_R) ‖ p(f_R))`.
    pub fn kl_divergence(&self) -> f64 {
        let r = self.num_pseudo() as f64;
        let solved = self.cache.chol.l().solve_lower_triangular(&self.chol_sigma);
        let trace = solved.map_or_else(|| frob(&self.cache.k_inv, &self.sigma()), |s| s.norm_squared());
        let log_det_sigma: f64 = 2.0 * self.chol_sigma.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = self.mu.dot(&self.alpha);
        (0.5 * (trace + quad - r + self.cache.log_det() - log_det_sigma)).max(0.0)
    }

    /// A reusable sampler for joint draws of `f` on `grid`.
    pub fn path_sampler(&self, grid: &[f64]) -> Result<PathSampler> {
        let kx = self.kernel.gram(&self.pseudo_inputs, grid);
        let corr = self.covariance_correction();
        let ck = &corr * &kx;
        let mean = kx.transpose() * &self.alpha;
        let gamma = self.kernel.variance();
        let diag: Vec<f64> = (0..grid.len())
            .map(|j| gamma + kx.column(j).dot(&ck.column(j)))
            .collect();
        let factor = pivoted_cholesky_with(
            diag,
            |p| {
                let head = kx.transpose() * ck.column(p);
                grid.iter()
                    .zip(head.iter())
                    .map(|(x, h)| self.kernel.eval(*x, grid[p]) + h)
                    .collect()
            },
            SAMPLING_TOL,
        )?;
        Ok(PathSampler {
            mean: mean.iter().copied().collect(),
            factor,
        })
    }

    /// `count` joint draws of `f` on `grid`, deterministic in `seed`.
    pub fn sample_function(&self, grid: &[f64], seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        if grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("sampling grid must be sorted".into()));
        }
        let sampler = self.path_sampler(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count).map(|_| sampler.sample(&mut rng)).collect())
    }
}

fn clamp_variance(v: f64, scale: f64) -> Result<f64> {
    if v >= 0.0 {
        return Ok(v);
    }
    let threshold = CLAMP_THRESHOLD * scale.max(1.0);
    if v >= -threshold {
        if v < -1e-12 * scale.max(1.0) {
            log::debug!("clamping negative variance {v:e} to zero");
        }
        Ok(0.0)
    } else if v.is_nan() {
        Err(Error::NegativeVariance(f64::NAN))
    } else {
        Err(Error::NegativeVariance(v))
    }
}

/// Mean and low-rank factor `F` of the posterior on a fixed grid.
#[derive(Debug, Clone)]
pub struct PathSampler {
    mean: Vec<f64>,
    factor: DMatrix<f64>,
}

impl PathSampler {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.factor.ncols()).map(|_| StandardNormal.sample(rng)).collect();
        let mut out = self.mean.clone();
        for (k, zk) in z.iter().enumerate() {
            for (o, f) in out.iter_mut().zip(self.factor.column(k).iter()) {
                *o += f * zk;
            }
        }
        out
    }
}
