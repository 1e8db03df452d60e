//! AUC and logloss evaluation.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::losses::{logloss, ModalityFeatureSet};
use crate::model::Model;

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

/// Rank-based (Mann–Whitney) AUC with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::domain(format!(
            "auc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("auc: score {s}")));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; a tie group spanning positions [i, j) shares rank (i + j + 1) / 2.
    // Working in doubled ranks keeps every partial sum an integer.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += group_pos * (i + j + 1) as u128;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// O(P·N) pairwise comparator: fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::domain("auc: length mismatch"));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut doubled: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 1 {
                continue;
            }
            doubled += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tag: String,
    pub auc: f64,
    pub logloss: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "tag,auc,logloss,positives,negatives";

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields are always serializable")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.tag, self.auc, self.logloss, self.positives, self.negatives
        )
    }
}

/// Predicted click probabilities for every example, in input order.
pub fn predict_all(
    model: &Model,
    examples: &[EncodedExample],
    features: Option<&ModalityFeatureSet>,
) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|ex| {
            let f = features.and_then(|s| s.get(&ex.item_key));
            model.predict(ex, f).map(|p| p.probability)
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    examples: &[EncodedExample],
    features: Option<&ModalityFeatureSet>,
    tag: &str,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::domain(format!(
            "cannot evaluate the empty {tag} split"
        )));
    }
    let scores = predict_all(model, examples, features)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let (positives, negatives) = class_counts(&labels);
    Ok(EvalReport {
        tag: tag.to_string(),
        auc: auc(&scores, &labels)?,
        logloss: logloss(&scores, &labels)?,
        positives,
        negatives,
    })
}
