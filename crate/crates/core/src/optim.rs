//! Projected limited-memory BFGS for box constraints of the form `x ≥ lower`.
//!
//! Components sitting on their bound with a gradient pushing outward are
//! frozen for the iteration; the two-loop recursion runs on the rest and the
//! trial point is projected back onto the box. An Armijo backtracking search
//! accepts only strict decreases, so the objective sequence is monotone. A
//! failed evaluation (error or non-finite value) is treated like an
//! insufficient decrease.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct OptOptions {
    pub(crate) max_iters: usize,
    pub(crate) memory: usize,
    pub(crate) armijo: f64,
    /// Stop once the projected gradient's infinity norm is at most this.
    pub(crate) grad_tol: f64,
    /// Stop once an accepted step improves `f` by less than this fraction of `|f|`.
    pub(crate) f_rel_tol: f64,
    pub(crate) max_backtracks: usize,
}

impl Default for OptOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            memory: 10,
            armijo: 1e-4,
            grad_tol: 1e-8,
            f_rel_tol: 1e-10,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OptOutcome {
    pub(crate) x: Vec<f64>,
    pub(crate) f: f64,
    pub(crate) iterations: usize,
    pub(crate) evaluations: usize,
    pub(crate) converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], lower: &[f64]) {
    for (v, l) in x.iter_mut().zip(lower) {
        if *v < *l {
            *v = *l;
        }
    }
}

/// Minimizes `f` from `x0` subject to `x ≥ lower`.
pub(crate) fn minimize<F>(mut f: F, x0: &[f64], lower: &[f64], opts: &OptOptions) -> Result<OptOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    assert_eq!(lower.len(), n);
    let mut x = x0.to_vec();
    project(&mut x, lower);
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Factorization(format!(
            "non-finite objective {fx} at the starting point"
        )));
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        let active: Vec<bool> = (0..n).map(|i| x[i] <= lower[i] && g[i] > 0.0).collect();
        let pg: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { g[i] }).collect();
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut d = two_loop(&pg, &history, &active);
        if dot(&d, &pg) >= 0.0 {
            history.clear();
            d = pg.iter().map(|v| -v).collect();
        }
        let mut step = if history.is_empty() {
            (1.0 / pg.iter().fold(0.0f64, |m, v| m.max(v.abs()))).min(1.0)
        } else {
            1.0
        };

        let f_tol = opts.f_rel_tol * fx.abs().max(1.0);
        let mut accepted = None;
        let mut negligible = false;
        for _ in 0..opts.max_backtracks {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xt, lower);
            let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            // Steps below rounding level of x cannot change f meaningfully.
            if s.iter().zip(&x).all(|(d, v)| d.abs() <= 1e-14 * v.abs().max(1.0)) {
                break;
            }
            let decrease = dot(&g, &s);
            // Predicted gain already under the tolerance: shorter steps only
            // probe evaluation noise.
            if -decrease <= f_tol {
                negligible = true;
                break;
            }
            evaluations += 1;
            if let Ok((ft, gt)) = f(&xt) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + opts.armijo * decrease && ft < fx {
                    accepted = Some((xt, s, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((xt, s, ft, gt)) = accepted else {
            if history.is_empty() || negligible {
                // Even a steepest-descent step cannot make progress.
                converged = true;
                break;
            }
            history.clear();
            continue;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improvement = fx - ft;
        x = xt;
        g = gt;
        fx = ft;
        if improvement <= f_tol {
            converged = true;
            break;
        }
    }
    Ok(OptOutcome {
        x,
        f: fx,
        iterations,
        evaluations,
        converged,
    })
}

/// `−H·q` from the stored pairs, with frozen components zeroed.
fn two_loop(q: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, active: &[bool]) -> Vec<f64> {
    let mask = |v: &mut Vec<f64>| {
        for (x, a) in v.iter_mut().zip(active) {
            if *a {
                *x = 0.0;
            }
        }
    };
    let mut r = q.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let mut sm = s.clone();
        mask(&mut sm);
        let a = rho * dot(&sm, &r);
        let mut ym = y.clone();
        mask(&mut ym);
        for (ri, yi) in r.iter_mut().zip(&ym) {
            *ri -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let yy = dot(y, y);
        if yy > 0.0 {
            let scale = dot(s, y) / yy;
            r.iter_mut().for_each(|v| *v *= scale);
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let mut ym = y.clone();
        mask(&mut ym);
        let b = rho * dot(&ym, &r);
        let mut sm = s.clone();
        mask(&mut sm);
        for (ri, si) in r.iter_mut().zip(&sm) {
            *ri += (a - b) * si;
        }
    }
    mask(&mut r);
    r.iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = OptOptions {
            max_iters: 500,
            f_rel_tol: 1e-16,
            ..Default::default()
        };
        let out = minimize(rosenbrock, &[-1.2, 1.0], &[f64::NEG_INFINITY; 2], &opts).unwrap();
        assert!(
            (out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn respects_lower_bounds() {
        // min (x − 1)² + (y + 2)² with y ≥ 0.5 → (1, 0.5)
        let f = |x: &[f64]| {
            Ok((
                (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2),
                vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 2.0)],
            ))
        };
        let out = minimize(f, &[3.0, 4.0], &[f64::NEG_INFINITY, 0.5], &OptOptions::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-7);
        assert_eq!(out.x[1], 0.5);
        assert!(out.converged);
    }

    #[test]
    fn backtracks_from_failed_evaluations() {
        // Minimum at 3 but evaluations beyond 2 fail; the solver should settle near the wall.
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                Err(Error::Domain("outside".into()))
            } else {
                Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]))
            }
        };
        let out = minimize(f, &[0.0], &[f64::NEG_INFINITY], &OptOptions::default()).unwrap();
        assert!(out.x[0] <= 2.0 && out.x[0] > 1.9, "{:?}", out.x);
    }

    #[test]
    fn objective_never_increases() {
        let mut seen = Vec::new();
        let f = rosenbrock;
        let opts = OptOptions {
            max_iters: 30,
            ..Default::default()
        };
        let mut x = vec![-1.5, 2.0];
        for _ in 0..5 {
            let out = minimize(f, &x, &[f64::NEG_INFINITY; 2], &opts).unwrap();
            seen.push(out.f);
            x = out.x;
        }
        assert!(seen.windows(2).all(|w| w[1] <= w[0]));
    }
}
