//! Special functions and the scalar bound machinery for `E[ln y²]` with
//! `y ~ N(μ, σ²)`.
//!
//! The central quantity is the Poisson-weighted digamma series
//!
//! ```text
//! g_m(y) = Σ_j  yʲ e^{-y} / j!  · ψ(j + m)
//! ```
//!
//! which gives the exact expectation `E[ln y²] = ln(2σ²) + g_{1/2}(φ/2)` with
//! `φ = (μ/σ)²`, together with the cheap lower bound
//! `ln(μ² + bσ²) − C − ln 2` for any `b ∈ [0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const LN_2: f64 = std::f64::consts::LN_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Above this Poisson mean the `m = 1/2` series is replaced by its asymptotic
/// expansion. At y = 40 the neglected part is of order e^{-40}.
pub const ASYMPTOTIC_SWITCH: f64 = 40.0;

/// Digamma function ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    Ok(psi(x))
}

/// Unchecked digamma: upward recurrence to x ≥ 10, then the asymptotic series.
pub(crate) fn psi(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - tail
}

/// ln Γ(x) for x > 0 via shifted Stirling series.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x < 10.0 {
        let mut shifted = x;
        let mut prod = 1.0;
        while shifted < 10.0 {
            prod *= shifted;
            shifted += 1.0;
        }
        return ln_gamma(shifted) - prod.ln();
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * (691.0 / 360_360.0 - inv2 / 156.0))))));
    (x - 0.5) * x.ln() - x + LN_SQRT_2PI + series
}

/// ln(n!) for a nonnegative integer count.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 2 {
        0.0
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `erf(u) − erf(v)` without cancellation when both arguments sit in the same tail.
pub fn erf_diff(u: f64, v: f64) -> f64 {
    if u >= 0.0 && v >= 0.0 {
        erfc(v) - erfc(u)
    } else if u <= 0.0 && v <= 0.0 {
        erfc(-u) - erfc(-v)
    } else {
        erf(u) - erf(v)
    }
}

/// Poisson-weighted digamma series `g_m(y)` truncated once the neglected tail
/// is below `tol`.
pub fn g_m(m: f64, y: f64, tol: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::Domain(format!("g_m requires m > 0, got {m}")));
    }
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::Domain(format!("g_m requires y >= 0, got {y}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("g_m requires tol > 0, got {tol}")));
    }
    Ok(g_m_with_derivative(m, y, tol).0)
}

/// `g_m(y)` and `g_m'(y) = Σ_j Pois(j; y) / (j + m)` in one pass.
pub(crate) fn g_m_with_derivative(m: f64, y: f64, tol: f64) -> (f64, f64) {
    if m == 0.5 && y > ASYMPTOTIC_SWITCH {
        return g_half_asymptotic(y);
    }
    g_m_series(m, y, tol)
}

/// Direct summation started at the Poisson mode so no weight underflows.
pub(crate) fn g_m_series(m: f64, y: f64, tol: f64) -> (f64, f64) {
    if y == 0.0 {
        return (psi(m), 1.0 / m);
    }
    let mode = y.floor();
    let w_mode = (mode * y.ln() - y - ln_gamma(mode + 1.0)).exp();
    let psi_mode = psi(mode + m);
    let mut g = w_mode * psi_mode;
    let mut dg = w_mode / (mode + m);

    // Upward tail; ratio of successive weights is y / (j + 1).
    // ψ(j + m) by the recurrence ψ(x + 1) = ψ(x) + 1/x in both directions.
    let mut w = w_mode;
    let mut j = mode;
    let mut p = psi_mode;
    loop {
        w *= y / (j + 1.0);
        p += 1.0 / (j + m);
        j += 1.0;
        if w == 0.0 {
            break;
        }
        g += w * p;
        dg += w / (j + m);
        let ratio = y / (j + 1.0);
        if j > y && ratio < 1.0 && w * p.abs().max(1.0) / (1.0 - ratio) < tol {
            break;
        }
    }

    // Downward tail; ψ is increasing, so ψ(m) bounds the magnitude below the mode.
    let psi_floor = psi(m).abs().max(1.0 / m);
    let mut w = w_mode;
    let mut j = mode;
    let mut p = psi_mode;
    while j > 0.0 {
        w *= j / y;
        j -= 1.0;
        p -= 1.0 / (j + m);
        if w == 0.0 {
            break;
        }
        g += w * p;
        dg += w / (j + m);
        let ratio = j / y;
        if ratio < 1.0 && w * psi_floor.max(p.abs()) / (1.0 - ratio) < tol {
            break;
        }
    }
    (g, dg)
}

// E[ln w] for w = (Z + √φ)², expanded in 1/φ: g_{1/2}(y) = ln y − Σ (2k−1)!! / (k (2y)^k).
fn g_half_asymptotic(y: f64) -> (f64, f64) {
    let two_y = 2.0 * y;
    let mut t = 1.0 / two_y;
    let mut sum_g = 0.0;
    let mut sum_d = 0.0;
    let mut k = 1.0;
    loop {
        sum_g += t / k;
        sum_d += t;
        let next = t * (2.0 * k + 1.0) / two_y;
        if next < 1e-18 || next > t || k > 60.0 {
            break;
        }
        t = next;
        k += 1.0;
    }
    (y.ln() - sum_g, 1.0 / y + sum_d / y)
}

/// Exact `E[ln y²]` for `y ~ N(mu, sigma²)`.
pub fn expected_log_square(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let phi = (mu / sigma).powi(2);
    Ok((2.0 * sigma * sigma).ln() + g_m_with_derivative(0.5, 0.5 * phi, SERIES_TOL).0)
}

pub(crate) const SERIES_TOL: f64 = 1e-14;

/// `E[ln y²]` as a function of the mean and variance, with both partial derivatives.
pub(crate) fn expected_log_square_moments(mean: f64, var: f64) -> (f64, f64, f64) {
    let y = 0.5 * mean * mean / var;
    let (g, dg) = g_m_with_derivative(0.5, y, SERIES_TOL);
    let value = LN_2 + var.ln() + g;
    let d_mean = dg * mean / var;
    let d_var = (1.0 - dg * y) / var;
    (value, d_mean, d_var)
}

/// The confluent-hypergeometric gap function `G(−φ/2)`, evaluated through
/// `G(−φ/2) = −g_{1/2}(φ/2) − 2 ln 2 − C`.
pub fn g_gap(neg_half_phi: f64) -> Result<f64> {
    if !(neg_half_phi <= 0.0) {
        return Err(Error::Domain(format!(
            "G is evaluated at nonpositive arguments, got {neg_half_phi}"
        )));
    }
    let (g, _) = g_m_with_derivative(0.5, -neg_half_phi, SERIES_TOL);
    Ok(-g - 2.0 * LN_2 - EULER_GAMMA)
}

/// Lower bound `ln(μ² + bσ²) − C − ln 2 ≤ E[ln y²]`.
pub fn lower_bound_log_square(mu: f64, sigma: f64, b: f64) -> Result<f64> {
    check_b(b)?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let arg = mu * mu + b * sigma * sigma;
    if arg <= 0.0 {
        return Err(Error::Domain("ln(0): mu = 0 with b = 0".into()));
    }
    Ok(arg.ln() - EULER_GAMMA - LN_2)
}

/// Bound-minus-truth gap `h(φ, b) = ln(φ + b) + G(−φ/2)`.
pub fn h_gap(phi: f64, b: f64) -> Result<f64> {
    check_b(b)?;
    if !(phi >= 0.0) {
        return Err(Error::Domain(format!("phi must be nonnegative, got {phi}")));
    }
    if phi == 0.0 && b == 0.0 {
        return Err(Error::Domain("h(0, 0) is ln(0)".into()));
    }
    Ok((phi + b).ln() + g_gap(-0.5 * phi)?)
}

pub(crate) fn check_b(b: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::Domain(format!("b must lie in [0, 1], got {b}")));
    }
    Ok(())
}

/// Variance of the gap `h(φ, b)` over a φ grid, for each candidate b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapGrid {
    pub phi_values: Vec<f64>,
    pub b_values: Vec<f64>,
    /// Population variance of `h(·, b)` over `phi_values`, one per b.
    pub variances: Vec<f64>,
}

/// Pick the `b` whose gap `h(φ, b)` varies least over `phi_grid`.
///
/// Ties resolve to the smallest b.
pub fn select_b(phi_grid: &[f64], b_grid: &[f64]) -> Result<(f64, GapGrid)> {
    if phi_grid.is_empty() || b_grid.is_empty() {
        return Err(Error::Domain("select_b needs nonempty grids".into()));
    }
    if phi_grid.windows(2).any(|w| !(w[1] > w[0])) || phi_grid.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Domain(
            "phi grid must be positive and strictly increasing".into(),
        ));
    }
    if b_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("b grid must be strictly increasing".into()));
    }
    for &b in b_grid {
        check_b(b)?;
    }

    // G(−φ/2) does not depend on b.
    let gaps = phi_grid
        .iter()
        .map(|&phi| g_gap(-0.5 * phi))
        .collect::<Result<Vec<_>>>()?;

    let n = phi_grid.len() as f64;
    let mut variances = Vec::with_capacity(b_grid.len());
    for &b in b_grid {
        let h: Vec<f64> = phi_grid.iter().zip(&gaps).map(|(&p, &g)| (p + b).ln() + g).collect();
        let mean = h.iter().sum::<f64>() / n;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        variances.push(var);
    }

    let mut best = 0;
    for (i, &v) in variances.iter().enumerate() {
        if v < variances[best] {
            best = i;
        }
    }
    Ok((
        b_grid[best],
        GapGrid {
            phi_values: phi_grid.to_vec(),
            b_values: b_grid.to_vec(),
            variances,
        },
    ))
}

/// `count` logarithmically spaced points between `lo` and `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    linspace(a, b, count).into_iter().map(|e| 10f64.powf(e)).collect()
}

/// `count` evenly spaced points between `lo` and `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count)
                .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

/// Composite Simpson's rule on `points` evenly spaced nodes (odd, ≥ 3).
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, points: usize) -> Result<f64> {
    check_simpson_points(points)?;
    if a == b {
        return Ok(0.0);
    }
    let h = (b - a) / (points - 1) as f64;
    let mut sum = f(a) + f(b);
    for i in 1..points - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + h * i as f64);
    }
    Ok(sum * h / 3.0)
}

/// Simpson's rule over samples already taken on an even grid with spacing `h`.
pub fn simpson_samples(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    debug_assert!(n >= 3 && n % 2 == 1);
    let mut sum = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        sum += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    sum * h / 3.0
}

pub(crate) fn check_simpson_points(points: usize) -> Result<()> {
    if points < 3 || points.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "Simpson's rule needs an odd number of points >= 3, got {points}"
        )));
    }
    Ok(())
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
