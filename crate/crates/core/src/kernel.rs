//! Squared-exponential (ARD) covariance on the real line and its interval
//! integrals.
//!
//! The double-kernel integral over an interval `[s, e]` has the closed form
//!
//! ```text
//! ∫ κ(zᵢ,x) κ(x,zⱼ) dx = γ² exp(−(zᵢ−zⱼ)²/(4a²)) · (√π a / 2) · [erf((e−z̄)/a) − erf((s−z̄)/a)]
//! ```
//!
//! with `z̄ = (zᵢ+zⱼ)/2`, obtained by completing the square in
//! `(x−zᵢ)² + (x−zⱼ)² = 2(x−z̄)² + (zᵢ−zⱼ)²/2`.
//!
//! Only one input dimension is supported.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::erf_diff;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// `κ(x, x') = γ exp(−(x − x')² / (2a²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArdKernel {
    variance: f64,
    lengthscale: f64,
}

impl ArdKernel {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Domain(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::Domain(format!(
                "kernel lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(Self { variance, lengthscale })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let d = (x - y) / self.lengthscale;
        self.variance * (-0.5 * d * d).exp()
    }

    /// Cross-covariance matrix `[κ(xᵢ, yⱼ)]`.
    pub fn gram(&self, xs: &[f64], ys: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), ys.len(), |i, j| self.eval(xs[i], ys[j]))
    }

    /// `∫_iv κ(zᵢ, x) κ(x, zⱼ) dx`.
    pub fn psi_entry(&self, z_i: f64, z_j: f64, iv: Interval) -> f64 {
        let a = self.lengthscale;
        let mid = 0.5 * (z_i + z_j);
        let sep = (-(z_i - z_j).powi(2) / (4.0 * a * a)).exp();
        let mass = erf_diff((iv.end - mid) / a, (iv.start - mid) / a);
        self.variance * self.variance * sep * 0.5 * SQRT_PI * a * mass
    }

    /// The symmetric matrix of `psi_entry` over all pseudo-input pairs.
    pub fn psi_matrix(&self, pseudo: &[f64], iv: Interval) -> DMatrix<f64> {
        PsiLayout::new(pseudo).matrix(self, iv, false).0
    }
}

/// A closed time interval `[start, end]`.
///
/// Datasets treat records as half-open `[start, end)`; integrals ignore the
/// difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() || start > end {
            return Err(Error::Domain(format!("invalid interval [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    /// Length of the overlap with `other` (0 when disjoint).
    pub fn overlap(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

/// Precomputed index structure for Ψ matrices over one set of pseudo inputs.
///
/// When the pseudo inputs are evenly spaced, every midpoint `(zᵢ+zⱼ)/2` is
/// indexed by `i + j` and every separation by `|i − j|`, so one Ψ matrix needs
/// only `2R − 1` erf differences.
#[derive(Debug, Clone)]
pub(crate) struct PsiLayout {
    pseudo: Vec<f64>,
    uniform_step: Option<f64>,
}

impl PsiLayout {
    pub(crate) fn new(pseudo: &[f64]) -> Self {
        let uniform_step = if pseudo.len() >= 2 {
            let step = (pseudo[pseudo.len() - 1] - pseudo[0]) / (pseudo.len() - 1) as f64;
            let scale = pseudo.iter().fold(step.abs(), |m, z| m.max(z.abs()));
            let uniform = pseudo
                .iter()
                .enumerate()
                .all(|(i, z)| (z - (pseudo[0] + step * i as f64)).abs() <= 1e-12 * scale);
            uniform.then_some(step)
        } else {
            None
        };
        Self {
            pseudo: pseudo.to_vec(),
            uniform_step,
        }
    }

    /// Ψ over `iv` and, optionally, its derivative with respect to `ln a`.
    pub(crate) fn matrix(
        &self,
        kernel: &ArdKernel,
        iv: Interval,
        with_grad: bool,
    ) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let r = self.pseudo.len();
        let a = kernel.lengthscale;
        let g2 = kernel.variance * kernel.variance;
        let scale = g2 * 0.5 * SQRT_PI * a;

        // mass(mid) = erf diff; dmass(mid) = a · [us e^{-us²} − ue e^{-ue²}] / (√π a / 2) scaled below.
        let mid_terms = |mid: f64| {
            let ue = (iv.end - mid) / a;
            let us = (iv.start - mid) / a;
            let mass = erf_diff(ue, us);
            let dmass = if with_grad {
                us * (-us * us).exp() - ue * (-ue * ue).exp()
            } else {
                0.0
            };
            (mass, dmass)
        };

        let mut phi = DMatrix::zeros(r, r);
        let mut dphi = if with_grad { Some(DMatrix::zeros(r, r)) } else { None };

        match self.uniform_step {
            Some(step) => {
                let z0 = self.pseudo[0];
                let mids: Vec<(f64, f64)> = (0..2 * r - 1).map(|s| mid_terms(z0 + 0.5 * step * s as f64)).collect();
                let seps: Vec<(f64, f64)> = (0..r)
                    .map(|d| {
                        let dist = step * d as f64;
                        let q = dist * dist / (4.0 * a * a);
                        ((-q).exp(), 2.0 * q)
                    })
                    .collect();
                for j in 0..r {
                    for i in j..r {
                        let (sep, dsep) = seps[i - j];
                        let (mass, dmass) = mids[i + j];
                        let v = scale * sep * mass;
                        phi[(i, j)] = v;
                        phi[(j, i)] = v;
                        if let Some(d) = dphi.as_mut() {
                            let dv = v * (1.0 + dsep) + g2 * sep * a * dmass;
                            d[(i, j)] = dv;
                            d[(j, i)] = dv;
                        }
                    }
                }
            }
            None => {
                for j in 0..r {
                    for i in j..r {
                        let (zi, zj) = (self.pseudo[i], self.pseudo[j]);
                        let q = (zi - zj).powi(2) / (4.0 * a * a);
                        let sep = (-q).exp();
                        let (mass, dmass) = mid_terms(0.5 * (zi + zj));
                        let v = scale * sep * mass;
                        phi[(i, j)] = v;
                        phi[(j, i)] = v;
                        if let Some(d) = dphi.as_mut() {
                            let dv = v * (1.0 + 2.0 * q) + g2 * sep * a * dmass;
                            d[(i, j)] = dv;
                            d[(j, i)] = dv;
                        }
                    }
                }
            }
        }
        (phi, dphi)
    }
}
