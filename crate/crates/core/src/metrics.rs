//! Accuracy and precision/recall/F1 over non-"None" relations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RelationSchema};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Counts pooled over all non-"None" relations.
    #[default]
    Micro,
    /// Unweighted mean of per-relation scores over non-"None" relations.
    Macro,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_samples: usize,
    pub averaging: Averaging,
    pub per_relation: BTreeMap<String, RelationCounts>,
    /// Predictions outside the type-compatible set (always 0 for a sound mask).
    pub mask_violations: usize,
    pub config_fingerprint: String,
}

impl MetricsReport {
    /// Checks the harmonic-mean and range identities.
    pub fn check_identities(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if ![self.accuracy, self.precision, self.recall, self.f1].into_iter().all(in_unit) {
            return Err(Error::InvalidInput(format!("metric outside [0, 1]: {self:?}")));
        }
        let (p, r) = (self.precision, self.recall);
        if self.averaging == Averaging::Micro && p + r > 0.0 && (self.f1 - 2.0 * p * r / (p + r)).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("f1 {} is not the harmonic mean of {p} and {r}", self.f1)));
        }
        Ok(())
    }
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: String,
    pub gold: Option<String>,
    pub masked_probs: Vec<f64>,
}

fn ratio(num: usize, den: usize, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} undefined (zero denominator); reported as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores `(gold, predicted)` pairs. Pairs without a gold label count as wrong
/// for accuracy and are skipped for precision and recall.
pub fn score(pairs: &[(Option<usize>, usize)], schema: &RelationSchema, averaging: Averaging) -> MetricsReport {
    let none = schema.none_id();
    let mut counts = vec![RelationCounts::default(); schema.num_relations()];
    let mut exact = 0;
    for &(gold, pred) in pairs {
        counts[pred].predicted += 1;
        if let Some(gold) = gold {
            counts[gold].gold += 1;
            if gold == pred {
                counts[gold].correct += 1;
                exact += 1;
            }
        }
    }
    let accuracy = if pairs.is_empty() { 0.0 } else { exact as f64 / pairs.len() as f64 };
    let positive = || counts.iter().enumerate().filter(|&(r, _)| r != none).map(|(_, c)| c);
    let (precision, recall, f1_score) = match averaging {
        Averaging::Micro => {
            let correct: usize = positive().map(|c| c.correct).sum();
            let p = ratio(correct, positive().map(|c| c.predicted).sum(), "precision");
            let r = ratio(correct, positive().map(|c| c.gold).sum(), "recall");
            (p, r, f1(p, r))
        }
        Averaging::Macro => {
            let scored: Vec<(f64, f64)> = positive()
                .filter(|c| c.gold + c.predicted > 0)
                .map(|c| {
                    let p = if c.predicted == 0 { 0.0 } else { c.correct as f64 / c.predicted as f64 };
                    let r = if c.gold == 0 { 0.0 } else { c.correct as f64 / c.gold as f64 };
                    (p, r)
                })
                .collect();
            if scored.is_empty() {
                log::warn!("no non-None relation occurs; macro scores reported as 0");
                (0.0, 0.0, 0.0)
            } else {
                let n = scored.len() as f64;
                let p = scored.iter().map(|s| s.0).sum::<f64>() / n;
                let r = scored.iter().map(|s| s.1).sum::<f64>() / n;
                let f = scored.iter().map(|&(p, r)| f1(p, r)).sum::<f64>() / n;
                (p, r, f)
            }
        }
    };
    let per_relation =
        counts.iter().enumerate().map(|(r, c)| (schema.relation_name(r).to_string(), *c)).collect();
    MetricsReport {
        accuracy,
        precision,
        recall,
        f1: f1_score,
        n_samples: pairs.len(),
        averaging,
        per_relation,
        mask_violations: 0,
        config_fingerprint: String::new(),
    }
}

/// Runs `model` on every sample of `dataset`.
pub fn predict_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<PredictionRecord>> {
    if dataset.schema.relations() != model.schema.relations() || dataset.schema.entity_types() != model.schema.entity_types() {
        return Err(Error::SchemaMismatch("dataset schema differs from the checkpoint schema".into()));
    }
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let p = model.predict(s)?;
            Ok(PredictionRecord {
                id: s.id.clone(),
                predicted: model.schema.relation_name(p.predicted).to_string(),
                gold: s.relation.map(|r| model.schema.relation_name(r).to_string()),
                masked_probs: p.masked_probs,
            })
        })
        .collect()
}

/// Predicts every sample and scores the predictions.
pub fn evaluate(model: &Model, dataset: &Dataset, averaging: Averaging) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let records = predict_dataset(model, dataset)?;
    let schema = &model.schema;
    let mut pairs = Vec::with_capacity(records.len());
    let mut violations = 0;
    for (s, rec) in dataset.samples.iter().zip(&records) {
        let pred = schema.relation_id(&rec.predicted).expect("prediction names come from the schema");
        let allowed = schema.allowed(s.head_type, s.tail_type);
        let leaked = rec.masked_probs.iter().zip(allowed).any(|(&p, &ok)| !ok && p != 0.0);
        if !allowed[pred] || leaked {
            violations += 1;
        }
        pairs.push((s.relation, pred));
    }
    let mut report = score(&pairs, schema, averaging);
    report.mask_violations = violations;
    report.config_fingerprint = crate::checkpoint::fingerprint(&model.config);
    Ok((report, records))
}

/// Writes one JSON object per prediction.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("prediction records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
