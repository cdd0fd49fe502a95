//! Integrated squared error and the Monte-Carlo test log-likelihood.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::fit::{closed_form_weights, FitResult, ModelKind};
use crate::kernel::Interval;
use crate::numerics::{check_simpson_points, linspace, log_sum_exp, simpson, simpson_samples};
use crate::svgp::SparseVariationalGP;

/// `∫_domain (estimated − truth)²` by Simpson's rule.
pub fn mise(
    estimated: impl Fn(f64) -> f64,
    truth: impl Fn(f64) -> f64,
    domain: Interval,
    quad_points: usize,
) -> Result<f64> {
    simpson(
        |x| (estimated(x) - truth(x)).powi(2),
        domain.start,
        domain.end,
        quad_points,
    )
    .map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub samples: usize,
    pub path_grid: usize,
    pub quad_points: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 50,
            path_grid: 3001,
            quad_points: 501,
            seed: 0,
        }
    }
}

impl EvalSettings {
    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("need at least one sampled path".into()));
        }
        if self.path_grid < 2 {
            return Err(Error::InvalidConfig("path grid needs at least 2 points".into()));
        }
        check_simpson_points(self.quad_points).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Test-set scores. Log-likelihoods omit `Σ ln m!`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mise: Option<f64>,
    /// `ln (1/U) Σ_u p(D_test | f_u)`.
    pub test_ll: f64,
    /// Sequential contributions `ln p̂(D_k | D_<k)` with subjects taken in id
    /// order; they sum to `test_ll`.
    pub per_subject_ll: Vec<(String, f64)>,
    /// `ln (1/U) Σ_u p(D_k | f_u)` for each subject on its own.
    pub per_subject_marginal_ll: Vec<(String, f64)>,
    pub wall_time: f64,
    pub settings: EvalSettings,
}

/// Per-subject `Σ_i (m_i ln r_i − r_i)` for a deterministic intensity, with
/// each `r_i` by Simpson's rule.
pub fn plugin_log_likelihood(
    intensity: impl Fn(f64) -> f64,
    test: &PanelDataset,
    quad_points: usize,
) -> Result<Vec<(String, f64)>> {
    check_simpson_points(quad_points)?;
    test.subjects
        .iter()
        .map(|s| {
            let mut total = 0.0;
            for r in &s.records {
                let rate = simpson(&intensity, r.interval.start, r.interval.end, quad_points)?;
                total += poisson_term(r.count, rate);
            }
            Ok((s.id.clone(), total))
        })
        .collect()
}

fn poisson_term(count: u64, rate: f64) -> f64 {
    if count == 0 {
        -rate
    } else if rate > 0.0 {
        count as f64 * rate.ln() - rate
    } else {
        f64::NEG_INFINITY
    }
}

/// Test log-likelihood of a fitted model. GP4CW subjects in the test set get
/// the closed-form weight computed from their own counts under `q`.
pub fn test_log_likelihood(fit: &FitResult, test: &PanelDataset, settings: &EvalSettings) -> Result<EvalReport> {
    let weights = match fit.model {
        ModelKind::Gp4cw => Some(closed_form_weights(&fit.gp, test, fit.config.weight_floor)?),
        _ => None,
    };
    test_log_likelihood_gp(&fit.gp, test, weights.as_deref(), settings)
}

/// As [`test_log_likelihood`] for a bare state, with optional per-subject
/// multipliers on the intensity.
pub fn test_log_likelihood_gp(
    gp: &SparseVariationalGP,
    test: &PanelDataset,
    weights: Option<&[f64]>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    let start = Instant::now();
    if let Some(w) = weights {
        if w.len() != test.len() {
            return Err(Error::InvalidData(format!(
                "{} weights for {} subjects",
                w.len(),
                test.len()
            )));
        }
    }
    let u_count = settings.samples;
    let empty = |test_ll| EvalReport {
        mise: None,
        test_ll,
        per_subject_ll: Vec::new(),
        per_subject_marginal_ll: Vec::new(),
        wall_time: start.elapsed().as_secs_f64(),
        settings: *settings,
    };
    let Some(hull) = test.hull() else {
        return Ok(empty(0.0));
    };
    let z = gp.pseudo_inputs();
    let lo = hull.start.min(z[0]);
    let hi = hull.end.max(z[z.len() - 1]);
    let grid = linspace(lo, hi, settings.path_grid);
    let step = (hi - lo) / (settings.path_grid - 1) as f64;
    let sampler = gp.path_sampler(&grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

    // scores[u][k]
    let mut scores = vec![vec![0.0; test.len()]; u_count];
    let q = settings.quad_points;
    let mut values = vec![0.0; q];
    for row in scores.iter_mut() {
        let path = sampler.sample(&mut rng);
        let at = |t: f64| {
            if step <= 0.0 {
                return path[0];
            }
            let pos = ((t - lo) / step).clamp(0.0, (grid.len() - 1) as f64);
            let i = (pos.floor() as usize).min(grid.len() - 2);
            let w = pos - i as f64;
            path[i] * (1.0 - w) + path[i + 1] * w
        };
        for (k, s) in test.subjects.iter().enumerate() {
            let scale = weights.map_or(1.0, |w| w[k]);
            let mut total = 0.0;
            for r in &s.records {
                let iv = r.interval;
                let rate = if iv.length() > 0.0 {
                    let h = iv.length() / (q - 1) as f64;
                    for (j, v) in values.iter_mut().enumerate() {
                        let f = at(iv.start + j as f64 * h);
                        *v = f * f;
                    }
                    scale * simpson_samples(&values, h)
                } else {
                    0.0
                };
                total += poisson_term(r.count, rate);
            }
            row[k] = total;
        }
    }

    let ln_u = (u_count as f64).ln();
    let joint: Vec<f64> = scores.iter().map(|row| row.iter().sum()).collect();
    let test_ll = log_sum_exp(&joint) - ln_u;

    let marginal: Vec<(String, f64)> = test
        .subjects
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let col: Vec<f64> = scores.iter().map(|row| row[k]).collect();
            (s.id.clone(), log_sum_exp(&col) - ln_u)
        })
        .collect();

    let mut order: Vec<usize> = (0..test.len()).collect();
    order.sort_by(|a, b| test.subjects[*a].id.cmp(&test.subjects[*b].id));
    let mut cumulative = vec![0.0; u_count];
    let mut prev = ln_u;
    let mut sequential = HashMap::with_capacity(test.len());
    for &k in &order {
        for (c, row) in cumulative.iter_mut().zip(&scores) {
            *c += row[k];
        }
        let next = log_sum_exp(&cumulative);
        sequential.insert(k, next - prev);
        prev = next;
    }
    let per_subject_ll = (0..test.len())
        .map(|k| (test.subjects[k].id.clone(), sequential[&k]))
        .collect();

    Ok(EvalReport {
        mise: None,
        test_ll,
        per_subject_ll,
        per_subject_marginal_ll: marginal,
        wall_time: start.elapsed().as_secs_f64(),
        settings: *settings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, square_wave_h1, IntensitySpec, PanelRecord, PanelSubject, SyntheticDesign};
    use crate::kernel::ArdKernel;
    use nalgebra::{DMatrix, DVector};

    fn rec(s: f64, e: f64, c: u64) -> PanelRecord {
        PanelRecord {
            interval: Interval { start: s, end: e },
            count: c,
        }
    }

    fn fitted_like_gp(seed: u64) -> SparseVariationalGP {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 8;
        let z = linspace(0.0, 60.0, r);
        let mu = DVector::from_fn(r, |_, _| 1.5 + 0.3 * rng.random::<f64>());
        let l = DMatrix::from_fn(r, r, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.2 + 0.1 * rng.random::<f64>(),
            std::cmp::Ordering::Greater => 0.05 * (rng.random::<f64>() - 0.5),
            _ => 0.0,
        });
        SparseVariationalGP::new(z, mu, l, ArdKernel::new(3.0, 8.0).unwrap(), 1e-6).unwrap()
    }

    fn test_set(seed: u64, n: usize) -> PanelDataset {
        let design = SyntheticDesign {
            n_subjects: n,
            ..SyntheticDesign::standard()
        };
        simulate(&IntensitySpec::Constant { value: 2.5 }, &design, seed)
            .unwrap()
            .panel
    }

    fn small(samples: usize, seed: u64) -> EvalSettings {
        EvalSettings {
            samples,
            path_grid: 601,
            quad_points: 101,
            seed,
        }
    }

    #[test]
    fn mise_closed_forms() {
        let dom = Interval { start: 0.0, end: 60.0 };
        assert_eq!(mise(square_wave_h1, square_wave_h1, dom, 101).unwrap(), 0.0);
        let v = mise(|_| 3.5, |_| 3.0, dom, 11).unwrap();
        assert!((v - 0.25 * 60.0).abs() < 1e-12);
        let v = mise(square_wave_h1, |_| 4.5, dom, 6001).unwrap();
        assert!((v - 375.0).abs() < 1e-3, "{v}");
        let a = mise(|x: f64| x.sin(), |x: f64| x.cos(), dom, 601).unwrap();
        let b = mise(|x: f64| x.cos(), |x: f64| x.sin(), dom, 601).unwrap();
        assert_eq!(a, b);
        assert!(mise(|_| 0.0, |_| 1.0, dom, 4).is_err());
    }

    #[test]
    fn single_path_matches_plugin() {
        let gp = fitted_like_gp(1);
        let test = test_set(2, 6);
        let s = small(1, 9);
        let report = test_log_likelihood_gp(&gp, &test, None, &s).unwrap();
        // redraw the same path and score it directly
        let grid = linspace(0.0, 60.0, s.path_grid);
        let path = gp
            .path_sampler(&grid)
            .unwrap()
            .sample(&mut ChaCha8Rng::seed_from_u64(9));
        let lam = |t: f64| {
            let f = crate::data::interpolate(&grid, &path, t);
            f * f
        };
        let direct = plugin_log_likelihood(lam, &test, s.quad_points).unwrap();
        let total: f64 = direct.iter().map(|(_, v)| v).sum();
        assert!(
            (report.test_ll - total).abs() < 1e-8 * total.abs(),
            "{} vs {total}",
            report.test_ll
        );
        for ((_, a), (_, b)) in report.per_subject_marginal_ll.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-8 * b.abs());
        }
    }

    #[test]
    fn sequential_parts_sum_to_total() {
        let gp = fitted_like_gp(3);
        let test = test_set(4, 12);
        let report = test_log_likelihood_gp(&gp, &test, None, &small(40, 5)).unwrap();
        let sum: f64 = report.per_subject_ll.iter().map(|(_, v)| v).sum();
        assert!((sum - report.test_ll).abs() < 1e-9, "{sum} vs {}", report.test_ll);
        assert_eq!(report.per_subject_ll.len(), test.len());
        assert!(report.test_ll.is_finite());
    }

    #[test]
    fn invariant_to_subject_order() {
        let gp = fitted_like_gp(5);
        let test = test_set(6, 8);
        let mut reversed = test.clone();
        reversed.subjects.reverse();
        let a = test_log_likelihood_gp(&gp, &test, None, &small(30, 1)).unwrap();
        let b = test_log_likelihood_gp(&gp, &reversed, None, &small(30, 1)).unwrap();
        assert!((a.test_ll - b.test_ll).abs() < 1e-9 * a.test_ll.abs());
        let find = |r: &EvalReport, id: &str| r.per_subject_ll.iter().find(|(i, _)| i == id).unwrap().1;
        for s in &test.subjects {
            assert!((find(&a, &s.id) - find(&b, &s.id)).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_test_set_scores_zero() {
        let gp = fitted_like_gp(1);
        let report = test_log_likelihood_gp(&gp, &PanelDataset::new(vec![]).unwrap(), None, &small(5, 1)).unwrap();
        assert_eq!(report.test_ll, 0.0);
        assert!(report.per_subject_ll.is_empty());
    }

    #[test]
    fn degenerate_posterior_matches_mean_plugin() {
        // dense pseudo inputs so the conditional prior variance is negligible too
        let r = 25;
        let z = linspace(0.0, 60.0, r);
        let mu = DVector::from_iterator(r, z.iter().map(|x| 1.6 + 0.3 * (x / 9.0).sin()));
        let gp = SparseVariationalGP::new(
            z,
            mu,
            DMatrix::identity(r, r) * 1e-5,
            ArdKernel::new(3.0, 10.0).unwrap(),
            1e-6,
        )
        .unwrap();
        let test = test_set(8, 5);
        let s = small(20, 2);
        let report = test_log_likelihood_gp(&gp, &test, None, &s).unwrap();
        let grid = linspace(0.0, 60.0, s.path_grid);
        let mean = gp.path_sampler(&grid).unwrap().mean().to_vec();
        let lam = |t: f64| {
            let f = crate::data::interpolate(&grid, &mean, t);
            f * f
        };
        let plug: f64 = plugin_log_likelihood(lam, &test, s.quad_points)
            .unwrap()
            .iter()
            .map(|(_, v)| v)
            .sum();
        assert!(
            (report.test_ll - plug).abs() < 1e-4 * plug.abs().max(1.0),
            "{} vs {plug}",
            report.test_ll
        );
    }

    #[test]
    fn weights_scale_the_rates() {
        let gp = fitted_like_gp(2);
        let test = PanelDataset::new(vec![PanelSubject::new(
            "a",
            vec![rec(0.0, 30.0, 40), rec(30.0, 60.0, 50)],
        )
        .unwrap()])
        .unwrap();
        let s = small(1, 3);
        let one = test_log_likelihood_gp(&gp, &test, Some(&[1.0]), &s).unwrap();
        let none = test_log_likelihood_gp(&gp, &test, None, &s).unwrap();
        assert_eq!(one.test_ll, none.test_ll);
        let two = test_log_likelihood_gp(&gp, &test, Some(&[2.0]), &s).unwrap();
        // m ln(2r) − 2r − (m ln r − r) = m ln 2 − r
        let grid = linspace(0.0, 60.0, s.path_grid);
        let path = gp
            .path_sampler(&grid)
            .unwrap()
            .sample(&mut ChaCha8Rng::seed_from_u64(3));
        let total_rate: f64 = simpson(
            |t| {
                let f = crate::data::interpolate(&grid, &path, t);
                f * f
            },
            0.0,
            60.0,
            201,
        )
        .unwrap();
        let expect = 90.0 * 2f64.ln() - total_rate;
        assert!(
            (two.test_ll - one.test_ll - expect).abs() < 1e-6 * total_rate,
            "{}",
            two.test_ll - one.test_ll
        );
        assert!(test_log_likelihood_gp(&gp, &test, Some(&[1.0, 2.0]), &s).is_err());
    }

    #[test]
    fn more_paths_agree_within_jackknife_error() {
        let gp = fitted_like_gp(11);
        let test = test_set(12, 10);
        let few = test_log_likelihood_gp(&gp, &test, None, &small(50, 1)).unwrap();
        let many = test_log_likelihood_gp(&gp, &test, None, &small(500, 2)).unwrap();
        let se = jackknife_se(&gp, &test, &small(50, 1));
        assert!(
            (few.test_ll - many.test_ll).abs() <= 3.0 * se,
            "{} vs {} (se {se})",
            few.test_ll,
            many.test_ll
        );
    }

    /// Leave-one-path-out standard error of the log-mean-exp estimator.
    fn jackknife_se(gp: &SparseVariationalGP, test: &PanelDataset, s: &EvalSettings) -> f64 {
        let grid = linspace(0.0, 60.0, s.path_grid);
        let sampler = gp.path_sampler(&grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let joint: Vec<f64> = (0..s.samples)
            .map(|_| {
                let path = sampler.sample(&mut rng);
                let lam = |t: f64| {
                    let f = crate::data::interpolate(&grid, &path, t);
                    f * f
                };
                plugin_log_likelihood(lam, test, s.quad_points)
                    .unwrap()
                    .iter()
                    .map(|(_, v)| v)
                    .sum()
            })
            .collect();
        let n = joint.len();
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let rest: Vec<f64> = joint
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| *v)
                    .collect();
                log_sum_exp(&rest) - ((n - 1) as f64).ln()
            })
            .collect();
        let mean = loo.iter().sum::<f64>() / n as f64;
        (((n - 1) as f64 / n as f64) * loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt()
    }
}
