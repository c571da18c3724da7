//! Ranking and error metrics over prediction/target pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AUC/ACC/RMSE/MAE over one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub acc: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n_pairs: usize,
}

impl MetricsReport {
    /// Computes all four metrics over the same pairs.
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(MetricsReport {
            auc: auc(scores, labels)?,
            acc: accuracy(scores, labels)?,
            rmse: rmse(scores, labels)?,
            mae: mae(scores, labels)?,
            n_pairs: scores.len(),
        })
    }
}

fn check_pairs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "need matching nonempty scores/labels, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("labels must be 0/1, got {bad}")));
    }
    Ok(())
}

/// Exact Mann–Whitney AUC: the probability that a random positive outscores
/// a random negative, counting ties as half. Computed by rank summation
/// with tie groups sharing their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged across the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &ix in &order[i..j] {
            if labels[ix] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fraction of pairs where thresholding the score at 0.5 (strictly greater
/// predicts 1) matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| u8::from(**s > 0.5) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Root-mean-square error between scores and binary labels.
pub fn rmse(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let mse = scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| (s - l as f64) * (s - l as f64))
        .sum::<f64>()
        / scores.len() as f64;
    Ok(mse.sqrt())
}

/// Mean absolute error between scores and binary labels.
pub fn mae(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(s, &l)| (s - l as f64).abs())
        .sum::<f64>()
        / scores.len() as f64)
}
