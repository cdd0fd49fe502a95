//! Line-oriented fitted-model files.
//!
//! ```text
//! PANELGP-MODEL v1
//! kind gp4c
//! <key> <values...>
//! end
//! ```
//!
//! Reals are written in shortest round-trip form, so a reload reproduces the
//! in-memory state bit for bit.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use panelgp::fit::{FitConfig, FitResult, ModelKind, StepFunction};
use panelgp::kernel::ArdKernel;
use panelgp::svgp::SparseVariationalGP;

use crate::error::CliError;

pub const MAGIC: &str = "PANELGP-MODEL v1";

#[derive(Debug, Clone)]
pub enum SavedModel {
    Gp(Box<FitResult>),
    Step(StepFunction),
}

fn reals(v: impl IntoIterator<Item = f64>) -> String {
    let items: Vec<String> = v.into_iter().map(|x| format!("{x:e}")).collect();
    format!("{} {}", items.len(), items.join(" ")).trim_end().to_string()
}

pub fn model_to_string(model: &SavedModel) -> String {
    let mut out = vec![MAGIC.to_string()];
    match model {
        SavedModel::Step(step) => {
            out.push("kind pwc".into());
            out.push(format!("edges {}", reals(step.edges.iter().copied())));
            out.push(format!("rates {}", reals(step.rates.iter().copied())));
        }
        SavedModel::Gp(fit) => {
            let c = &fit.config;
            let gp = &fit.gp;
            out.push(format!("kind {}", fit.model.name()));
            out.push(format!("config.n_pseudo {}", c.n_pseudo));
            out.push(format!("config.b {:e}", c.b));
            out.push(format!("config.max_vem_iters {}", c.max_vem_iters));
            out.push(format!("config.inner_opt_iters {}", c.inner_opt_iters));
            out.push(format!("config.rel_tol {:e}", c.rel_tol));
            out.push(format!("config.jitter {:e}", c.jitter));
            out.push(format!("config.seed {}", c.seed));
            out.push(format!("config.weight_floor {:e}", c.weight_floor));
            out.push(format!("variance {:e}", gp.kernel().variance()));
            out.push(format!("lengthscale {:e}", gp.kernel().lengthscale()));
            out.push(format!("jitter {:e}", gp.jitter()));
            out.push(format!("pseudo_inputs {}", reals(gp.pseudo_inputs().iter().copied())));
            out.push(format!("mu {}", reals(gp.mu().iter().copied())));
            let l = gp.chol_sigma();
            let r = l.nrows();
            let lower = (0..r)
                .flat_map(|i| (0..=i).map(move |j| (i, j)))
                .map(|(i, j)| l[(i, j)]);
            out.push(format!("chol_sigma {}", reals(lower)));
            out.push(format!(
                "bound_trajectory {}",
                reals(fit.bound_trajectory.iter().copied())
            ));
            out.push(format!(
                "hyper_trajectory {}",
                reals(fit.hyper_trajectory.iter().flat_map(|(g, a)| [*g, *a]))
            ));
            out.push(format!("wall_time {:e}", fit.wall_time));
            out.push(format!("converged {}", fit.converged));
            out.push(format!("subjects {}", fit.subject_ids.len()));
            for (k, id) in fit.subject_ids.iter().enumerate() {
                let w = fit.weights.as_ref().map_or("-".to_string(), |w| format!("{:e}", w[k]));
                out.push(format!("{w} {}", serde_json::to_string(id).expect("strings serialize")));
            }
        }
    }
    out.push("end".into());
    out.join("\n") + "\n"
}

pub fn write_model(model: &SavedModel, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, model_to_string(model)).map_err(|e| CliError::io("cannot write model", path, e))
}

pub fn read_model(path: &Path) -> Result<SavedModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io("cannot read model", path, e))?;
    parse_model(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

struct Fields<'a> {
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Result<&'a str, CliError> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| CliError::Input(format!("model file lacks {key:?}")))
    }

    fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key)?;
        v.trim()
            .parse()
            .map_err(|_| CliError::Input(format!("model file: bad value {v:?} for {key:?}")))
    }

    fn reals(&self, key: &str) -> Result<Vec<f64>, CliError> {
        let mut it = self.get(key)?.split_whitespace();
        let bad = || CliError::Input(format!("model file: malformed list {key:?}"));
        let n: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let v: Vec<f64> = it.map(|s| s.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
        if v.len() != n {
            return Err(bad());
        }
        Ok(v)
    }
}

pub fn parse_model(text: &str) -> Result<SavedModel, CliError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(CliError::Input(format!("not a model file (expected header {MAGIC:?})")));
    }
    let mut map = HashMap::new();
    let mut subject_lines = Vec::new();
    let mut ended = false;
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line == "end" {
            ended = true;
            break;
        }
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if map.insert(key, rest).is_some() {
            return Err(CliError::Input(format!("model file repeats {key:?}")));
        }
        if key == "subjects" {
            let n: usize = rest
                .trim()
                .parse()
                .map_err(|_| CliError::Input("model file: bad subject count".into()))?;
            for _ in 0..n {
                subject_lines.push(
                    lines
                        .next()
                        .ok_or_else(|| CliError::Input("model file: truncated subject list".into()))?,
                );
            }
        }
    }
    if !ended {
        return Err(CliError::Input("model file is truncated (no `end`)".into()));
    }
    let f = Fields { map };
    let kind = f.get("kind")?.trim();
    if kind == "pwc" {
        let edges = f.reals("edges")?;
        let rates = f.reals("rates")?;
        if rates.is_empty() || edges.len() != rates.len() + 1 {
            return Err(CliError::Input("model file: edges must outnumber rates by one".into()));
        }
        return Ok(SavedModel::Step(StepFunction { edges, rates }));
    }
    let model: ModelKind = kind.parse()?;
    let config = FitConfig {
        n_pseudo: f.scalar("config.n_pseudo")?,
        b: f.scalar("config.b")?,
        max_vem_iters: f.scalar("config.max_vem_iters")?,
        inner_opt_iters: f.scalar("config.inner_opt_iters")?,
        rel_tol: f.scalar("config.rel_tol")?,
        jitter: f.scalar("config.jitter")?,
        seed: f.scalar("config.seed")?,
        weight_floor: f.scalar("config.weight_floor")?,
    };
    let z = f.reals("pseudo_inputs")?;
    let r = z.len();
    let mu = f.reals("mu")?;
    let packed = f.reals("chol_sigma")?;
    if mu.len() != r || packed.len() != r * (r + 1) / 2 {
        return Err(CliError::Input(
            "model file: variational sizes disagree with pseudo inputs".into(),
        ));
    }
    let mut l = DMatrix::zeros(r, r);
    let mut it = packed.into_iter();
    for i in 0..r {
        for j in 0..=i {
            l[(i, j)] = it.next().expect("length checked");
        }
    }
    let kernel = ArdKernel::new(f.scalar("variance")?, f.scalar("lengthscale")?)?;
    let gp = SparseVariationalGP::new(z, DVector::from_vec(mu), l, kernel, f.scalar("jitter")?)?;
    let hyper = f.reals("hyper_trajectory")?;
    if hyper.len() % 2 != 0 {
        return Err(CliError::Input("model file: odd hyper trajectory".into()));
    }
    let mut subject_ids = Vec::with_capacity(subject_lines.len());
    let mut weights = Vec::with_capacity(subject_lines.len());
    for line in subject_lines {
        let (w, id) = line
            .trim()
            .split_once(' ')
            .ok_or_else(|| CliError::Input(format!("model file: bad subject line {line:?}")))?;
        let id: String =
            serde_json::from_str(id).map_err(|e| CliError::Input(format!("model file: subject id: {e}")))?;
        subject_ids.push(id);
        if w != "-" {
            weights.push(
                w.parse::<f64>()
                    .map_err(|_| CliError::Input(format!("model file: bad weight {w:?}")))?,
            );
        }
    }
    let weights = match weights.len() {
        0 => None,
        n if n == subject_ids.len() => Some(weights),
        _ => return Err(CliError::Input("model file: weights missing for some subjects".into())),
    };
    Ok(SavedModel::Gp(Box::new(FitResult {
        model,
        config,
        gp,
        bound_trajectory: f.reals("bound_trajectory")?,
        hyper_trajectory: hyper.chunks(2).map(|c| (c[0], c[1])).collect(),
        weights,
        subject_ids,
        wall_time: f.scalar("wall_time")?,
        converged: f.scalar("converged")?,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use panelgp::numerics::linspace;

    fn sample_fit() -> FitResult {
        let r = 4;
        let z = linspace(0.0, 3.0, r);
        let l = DMatrix::from_fn(r, r, |i, j| {
            if i >= j {
                0.1 + 0.01 * (i * r + j) as f64 / 3.0
            } else {
                0.0
            }
        });
        let gp = SparseVariationalGP::new(
            z,
            DVector::from_vec(vec![0.3, -1.0 / 3.0, 2.0, 1e-300]),
            l,
            ArdKernel::new(2.0 / 3.0, 0.7).unwrap(),
            1e-6,
        )
        .unwrap();
        FitResult {
            model: ModelKind::Gp4cw,
            config: FitConfig::default(),
            gp,
            bound_trajectory: vec![-10.0, -5.5, -5.25],
            hyper_trajectory: vec![(1.0, 2.0), (0.5, 1.5), (2.0 / 3.0, 0.7)],
            weights: Some(vec![1e-6, 2.5]),
            subject_ids: vec!["a b".into(), "\"quoted\"".into()],
            wall_time: 0.125,
            converged: true,
        }
    }

    #[test]
    fn gp_round_trip_is_exact() {
        let fit = sample_fit();
        let text = model_to_string(&SavedModel::Gp(Box::new(fit.clone())));
        let SavedModel::Gp(back) = parse_model(&text).unwrap() else {
            panic!("wrong kind")
        };
        assert_eq!(back.gp.mu(), fit.gp.mu());
        assert_eq!(back.gp.chol_sigma(), fit.gp.chol_sigma());
        assert_eq!(back.gp.kernel(), fit.gp.kernel());
        assert_eq!(back.bound_trajectory, fit.bound_trajectory);
        assert_eq!(back.hyper_trajectory, fit.hyper_trajectory);
        assert_eq!(back.weights, fit.weights);
        assert_eq!(back.subject_ids, fit.subject_ids);
        assert_eq!(back.config, fit.config);
        assert_eq!(model_to_string(&SavedModel::Gp(back)), text);
    }

    #[test]
    fn step_round_trip() {
        let step = StepFunction {
            edges: vec![0.0, 1.0, 2.5],
            rates: vec![0.1, 1.0 / 7.0],
        };
        let SavedModel::Step(back) = parse_model(&model_to_string(&SavedModel::Step(step.clone()))).unwrap() else {
            panic!()
        };
        assert_eq!(back, step);
    }

    #[test]
    fn rejects_damaged_files() {
        let text = model_to_string(&SavedModel::Gp(Box::new(sample_fit())));
        assert!(parse_model(&text.replace(MAGIC, "PANELGP-MODEL v2")).is_err());
        assert!(parse_model(&text.replace("end\n", "")).is_err());
        assert!(parse_model(&text.replace("mu 4", "mu 5")).is_err());
        let no_kind: String = text
            .lines()
            .filter(|l| !l.starts_with("kind"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(parse_model(&no_kind).is_err());
    }
}
