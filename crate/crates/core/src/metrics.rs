//! Natural / robust accuracy, per-class accuracy and the parameter
//! heterogeneity statistic `s²`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{bim, fgsm, pgd, AttackSpec, Objective, Target};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed;

/// Metrics recorded after one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub natural_acc: f64,
    /// Robust accuracy per attack name; `None` when the attack was not run
    /// this round.
    pub robust_acc: IndexMap<String, Option<f64>>,
    /// `None` marks a class with no evaluation samples.
    pub per_class_acc: Vec<Option<f64>>,
    pub heterogeneity_s2: f64,
    /// Number of clients that uploaded a model this round.
    pub clients: usize,
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

fn tally(predictions: &[usize], data: &Dataset) -> (f64, Vec<Option<f64>>) {
    let c = data.classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&p, &y) in predictions.iter().zip(data.labels()) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let overall = hits.iter().sum::<usize>() as f64 / data.len() as f64;
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    (overall, per_class)
}

fn check_eval(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("accuracy of an empty dataset".into()));
    }
    if model.input_dim() != data.dim() || model.output_dim() != data.classes() {
        return Err(Error::Shape(format!(
            "model maps {} -> {}, data has {} features and {} classes",
            model.input_dim(),
            model.output_dim(),
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Overall and per-class accuracy on clean inputs.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<(f64, Vec<Option<f64>>)> {
    check_eval(model, data)?;
    let preds = data
        .features()
        .par_iter()
        .map(|x| model.forward(x).map(|z| predict(&z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(tally(&preds, data))
}

/// Attack families available for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

/// A named white-box attack used at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAttack {
    pub name: String,
    pub kind: AttackKind,
    pub spec: AttackSpec,
}

impl EvalAttack {
    /// Parses names of the form `fgsm`, `bim<K>` or `pgd<K>`.
    pub fn from_name(name: &str, base: AttackSpec) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let (kind, rest) = if lower == "fgsm" {
            (AttackKind::Fgsm, "")
        } else if let Some(r) = lower.strip_prefix("bim") {
            (AttackKind::Bim, r)
        } else if let Some(r) = lower.strip_prefix("pgd") {
            (AttackKind::Pgd, r)
        } else {
            return Err(Error::Config(format!("unknown attack `{name}`")));
        };
        let steps = match (kind, rest) {
            (AttackKind::Fgsm, _) => 1,
            (_, "") => base.steps,
            (_, r) => r
                .strip_prefix('-')
                .unwrap_or(r)
                .parse()
                .map_err(|_| Error::Config(format!("unknown attack `{name}`")))?,
        };
        let spec = AttackSpec {
            steps,
            objective: Objective::Ce,
            ..base
        };
        spec.validate()?;
        Ok(Self {
            name: lower,
            kind,
            spec,
        })
    }
}

/// Accuracy on white-box adversarial versions of `data`, each generated
/// against `model` itself.
pub fn robust_accuracy(model: &Model, data: &Dataset, attack: &EvalAttack, seed_base: u64) -> Result<f64> {
    check_eval(model, data)?;
    attack.spec.validate()?;
    let spec = AttackSpec {
        objective: Objective::Ce,
        ..attack.spec
    };
    let preds = data
        .features()
        .par_iter()
        .zip(data.labels().par_iter())
        .enumerate()
        .map(|(j, (x, &y))| {
            let target = Target::label(y);
            let x_adv = match attack.kind {
                AttackKind::Fgsm => fgsm(model, Objective::Ce, x, target, spec.epsilon, spec.domain_clip)?,
                AttackKind::Bim => bim(model, &spec, x, target)?.x_adv,
                AttackKind::Pgd => {
                    let mut rng = seed::rng(seed_base, &[seed::tag::EVAL_ATTACK, j as u64]);
                    pgd(model, &spec, x, target, &mut rng)?.x_adv
                }
            };
            model.forward(&x_adv).map(|z| predict(&z))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tally(&preds, data).0)
}

/// Unbiased sample variance of parameter vectors:
/// `1/(m−1) Σ_i ‖θ_i − θ̄‖²`.
pub fn sample_variance(vectors: &[&[f64]]) -> Result<f64> {
    let m = vectors.len();
    if m < 2 {
        return Err(Error::Domain(format!("sample variance needs at least 2 vectors, got {m}")));
    }
    let p = vectors[0].len();
    if vectors.iter().any(|v| v.len() != p) {
        return Err(Error::Shape("parameter vectors differ in length".into()));
    }
    let mut mean = vec![0.0; p];
    for v in vectors {
        for (a, b) in mean.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    let ss: f64 = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(ss / (m - 1) as f64)
}

/// `s²` over the flattened parameters of `models`.
pub fn heterogeneity_s2(models: &[Model]) -> Result<f64> {
    if let Some(first) = models.first() {
        if models.iter().any(|m| !m.same_architecture(first)) {
            return Err(Error::Shape("models differ in architecture".into()));
        }
    }
    let views: Vec<&[f64]> = models.iter().map(|m| m.params()).collect();
    sample_variance(&views)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsFormat {
    Csv,
    Json,
}

/// Column layout of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSchema {
    pub attacks: Vec<String>,
    pub classes: usize,
}

impl MetricsSchema {
    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["round", "natural_acc", "s2", "clients"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(self.attacks.iter().map(|a| format!("rob_{a}")));
        cols.extend((0..self.classes).map(|c| format!("cls_{c}")));
        cols
    }
}

fn csv_row(m: &RoundMetrics, schema: &MetricsSchema) -> String {
    let mut cells = vec![
        m.round.to_string(),
        m.natural_acc.to_string(),
        m.heterogeneity_s2.to_string(),
        m.clients.to_string(),
    ];
    for a in &schema.attacks {
        cells.push(match m.robust_acc.get(a) {
            Some(Some(v)) => v.to_string(),
            _ => String::new(),
        });
    }
    for c in 0..schema.classes {
        cells.push(match m.per_class_acc.get(c) {
            Some(Some(v)) => v.to_string(),
            _ => "absent".to_string(),
        });
    }
    cells.join(",")
}

/// Renders the series in the requested format.
pub fn render_metrics(series: &[RoundMetrics], schema: &MetricsSchema, format: MetricsFormat) -> Result<String> {
    match format {
        MetricsFormat::Csv => {
            let mut out = schema.header().join(",");
            out.push('\n');
            for m in series {
                out.push_str(&csv_row(m, schema));
                out.push('\n');
            }
            Ok(out)
        }
        MetricsFormat::Json => serde_json::to_string_pretty(series)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Numeric(format!("metrics serialization: {e}"))),
    }
}

pub fn write_metrics(
    series: &[RoundMetrics],
    schema: &MetricsSchema,
    path: &Path,
    format: MetricsFormat,
) -> Result<()> {
    let text = render_metrics(series, schema, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<Vec<RoundMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
