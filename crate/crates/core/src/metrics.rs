//! Accuracy per question type, arithmetic and harmonic mean-per-type (MPT),
//! type confusion matrices and the gated feature-norm diagnostic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EncodedSample, GateMode, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentages, for types that occur in the evaluated set.
    pub per_type_acc: BTreeMap<String, f64>,
    pub n_per_type: BTreeMap<String, usize>,
    pub arithmetic_mpt: f64,
    pub harmonic_mpt: f64,
    pub overall_acc: f64,
    /// Types with no samples; excluded from both MPTs.
    pub absent_types: Vec<String>,
}

pub fn arithmetic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("arithmetic_mean"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Harmonic mean; any zero term makes the result 0.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("harmonic_mean"));
    }
    if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Data("harmonic mean needs finite non-negative values".into()));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// `(arithmetic, harmonic)` MPT of per-type accuracies.
pub fn mpt(per_type: &[f64]) -> Result<(f64, f64)> {
    Ok((arithmetic_mean(per_type)?, harmonic_mean(per_type)?))
}

/// Simple accuracy per question type. `types[i]` is the ground-truth type of
/// sample `i`, indexing `type_names`.
pub fn evaluate(predictions: &[usize], targets: &[usize], types: &[usize], type_names: &[String]) -> Result<EvalReport> {
    if predictions.len() != targets.len() || targets.len() != types.len() {
        return Err(Error::Data(format!(
            "evaluate: {} predictions, {} targets, {} types",
            predictions.len(),
            targets.len(),
            types.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let n = type_names.len();
    let mut correct = vec![0usize; n];
    let mut total = vec![0usize; n];
    for i in 0..types.len() {
        let t = types[i];
        if t >= n {
            return Err(Error::Index {
                what: "question type",
                index: t,
                len: n,
            });
        }
        total[t] += 1;
        if predictions[i] == targets[i] {
            correct[t] += 1;
        }
    }

    let mut per_type_acc = BTreeMap::new();
    let mut n_per_type = BTreeMap::new();
    let mut absent_types = Vec::new();
    let mut accs = Vec::new();
    for t in 0..n {
        n_per_type.insert(type_names[t].clone(), total[t]);
        if total[t] == 0 {
            absent_types.push(type_names[t].clone());
            continue;
        }
        let acc = 100.0 * correct[t] as f64 / total[t] as f64;
        per_type_acc.insert(type_names[t].clone(), acc);
        accs.push(acc);
    }
    let (arithmetic_mpt, harmonic_mpt) = mpt(&accs)?;
    Ok(EvalReport {
        per_type_acc,
        n_per_type,
        arithmetic_mpt,
        harmonic_mpt,
        overall_acc: 100.0 * correct.iter().sum::<usize>() as f64 / predictions.len() as f64,
        absent_types,
    })
}

/// Rows are target types, columns predicted types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    /// Row-normalized percentages; empty rows stay all zero.
    pub normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    /// Percentage of target type `from` predicted as `to`.
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.normalized[from][to]
    }
}

pub fn confusion(type_preds: &[usize], type_targets: &[usize], labels: &[String]) -> Result<ConfusionMatrix> {
    if type_preds.len() != type_targets.len() {
        return Err(Error::Data(format!(
            "confusion: {} predictions, {} targets",
            type_preds.len(),
            type_targets.len()
        )));
    }
    let n = labels.len();
    let mut counts = vec![vec![0usize; n]; n];
    for (&p, &t) in type_preds.iter().zip(type_targets) {
        for idx in [p, t] {
            if idx >= n {
                return Err(Error::Index {
                    what: "question type",
                    index: idx,
                    len: n,
                });
            }
        }
        counts[t][p] += 1;
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
        normalized,
    })
}

/// Evaluates a model on encoded samples. The confusion matrix is produced
/// only for models with a question-type head.
pub fn evaluate_model(model: &Model, samples: &[EncodedSample]) -> Result<(EvalReport, Option<ConfusionMatrix>)> {
    let preds = model.predict(samples, GateMode::Predicted)?;
    let answers: Vec<usize> = preds.iter().map(|p| p.answer()).collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.answer).collect();
    let types: Vec<usize> = samples.iter().map(|s| s.question_type).collect();
    let names = model.types().names();
    let report = evaluate(&answers, &targets, &types, names)?;
    let matrix = if model.has_type_head() {
        let type_preds: Vec<usize> = preds.iter().map(|p| p.predicted_type().expect("type head")).collect();
        Some(confusion(&type_preds, &types, names)?)
    } else {
        None
    };
    Ok((report, matrix))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub question_type: String,
    pub block: String,
    pub n: usize,
    /// Mean L2 norm of the block before gating.
    pub raw_norm: f64,
    /// Mean L2 norm of the block after gating.
    pub gated_norm: f64,
    /// `gated_norm - raw_norm`.
    pub difference: f64,
    /// Mean |w| over the block's gate entries for this type.
    pub mean_abs_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub rows: Vec<NormRow>,
}

impl NormReport {
    pub fn row(&self, question_type: &str, block: &str) -> Option<&NormRow> {
        self.rows.iter().find(|r| r.question_type == question_type && r.block == block)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("question_type,block,n,raw_norm,gated_norm,difference,mean_abs_weight\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.question_type, r.block, r.n, r.raw_norm, r.gated_norm, r.difference, r.mean_abs_weight
            )
            .unwrap();
        }
        out
    }
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Per (type, visual block) norms of the features before and after QTA
/// gating, averaged over the samples of each type. Types without samples
/// are skipped.
pub fn norm_report(model: &Model, samples: &[EncodedSample]) -> Result<NormReport> {
    if !model.has_qta() {
        return Err(Error::Config(format!(
            "{} has no QTA gate",
            model.spec().architecture.name()
        )));
    }
    let blocks = model.visual_blocks();
    let sources = model.spec().visual_sources();
    let mut rows = Vec::new();
    for t in 0..model.types().len() {
        let gate = model.gate_column(t).expect("QTA model");
        let of_type: Vec<&EncodedSample> = samples.iter().filter(|s| s.question_type == t).collect();
        if of_type.is_empty() {
            continue;
        }
        for ((name, start, end), &src) in blocks.iter().zip(&sources) {
            let g = &gate[*start..*end];
            let mut raw = 0.0;
            let mut gated = 0.0;
            for s in &of_type {
                let v = &s.visual[src];
                raw += l2(v.iter().copied());
                gated += l2(v.iter().zip(g).map(|(x, w)| x * w));
            }
            let n = of_type.len() as f64;
            let (raw, gated) = (raw / n, gated / n);
            rows.push(NormRow {
                question_type: model.types().name(t).to_string(),
                block: name.clone(),
                n: of_type.len(),
                raw_norm: raw,
                gated_norm: gated,
                difference: gated - raw,
                mean_abs_weight: g.iter().map(|w| w.abs()).sum::<f64>() / g.len().max(1) as f64,
            });
        }
    }
    Ok(NormReport { rows })
}
