//! Ground truth for evaluation: dense attention, exact top-k selection on
//! group-summed logits, and the metrics derived from them.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsa::attend;
use crate::numerics::{argtopk, group_sum, Matrix};

/// Full scaled softmax attention, per head.
pub fn dense_attention(q_group: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    attend(q_group, keys, values)
}

/// Group-summed logits `sum_h q[h] . K[i]`, accumulated in `f64` over
/// dimensions in ascending order.
pub fn group_logits(q_group: &Matrix, keys: &Matrix) -> Result<Vec<f64>> {
    if q_group.cols() != keys.cols() {
        return Err(Error::InvalidShape(format!(
            "query width {} vs key width {}",
            q_group.cols(),
            keys.cols()
        )));
    }
    let summed = group_sum(q_group);
    Ok(keys
        .iter_rows()
        .map(|k| summed.iter().zip(k).map(|(&q, &x)| q * x as f64).sum())
        .collect())
}

/// Indices of the `k` largest group-summed logits, ascending.
pub fn exact_topk_indices(q_group: &Matrix, keys: &Matrix, k: usize) -> Result<Vec<usize>> {
    let logits = group_logits(q_group, keys)?;
    let mut idx = argtopk(&logits, k)?;
    idx.sort_unstable();
    Ok(idx)
}

pub fn recall(predicted: &[usize], oracle: &[usize]) -> Result<f64> {
    if oracle.is_empty() {
        return Err(Error::InvalidInput(
            "recall against an empty oracle set".into(),
        ));
    }
    let predicted: HashSet<usize> = predicted.iter().copied().collect();
    let hits = oracle.iter().filter(|i| predicted.contains(i)).count();
    Ok(hits as f64 / oracle.len() as f64)
}

/// Relative L2 error `||y - ref|| / ||ref||` (absolute when `ref` is zero).
pub fn relative_l2(y: &[f32], reference: &[f32]) -> f64 {
    let diff: f64 = y
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let norm: f64 = reference.iter().map(|&b| (b as f64).powi(2)).sum();
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

/// `1 - cos(y, ref)`; zero when both are zero.
pub fn cosine_distance(y: &[f32], reference: &[f32]) -> f64 {
    let dot: f64 = y
        .iter()
        .zip(reference)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    let ny: f64 = y.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nr: f64 = reference
        .iter()
        .map(|&b| (b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if ny == 0.0 && nr == 0.0 {
        0.0
    } else if ny == 0.0 || nr == 0.0 {
        1.0
    } else {
        1.0 - dot / (ny * nr)
    }
}

/// Running union of exact top-k index sets across decode steps.
#[derive(Debug, Clone, Default)]
pub struct UniqueTopkTracker {
    seen: HashSet<usize>,
    max_seq_len: usize,
}

impl UniqueTopkTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one step's top-k set over a sequence of `seq_len` tokens and
    /// returns the running unique count.
    pub fn observe(&mut self, indices: &[usize], seq_len: usize) -> usize {
        self.seen.extend(indices.iter().copied());
        self.max_seq_len = self.max_seq_len.max(seq_len);
        self.seen.len()
    }

    pub fn unique_count(&self) -> usize {
        self.seen.len()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }
}

/// Point of an empirical CDF: fraction of samples `<= value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

pub fn empirical_cdf(samples: &[f64]) -> Vec<CdfPoint> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut points: Vec<CdfPoint> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.value == v => last.fraction = fraction,
            _ => points.push(CdfPoint { value: v, fraction }),
        }
    }
    points
}

/// One decode step, averaged over groups where noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub turn: usize,
    pub step: usize,
    /// Mean over groups of recall against the exact top-k set.
    pub recall: f64,
    /// Relative L2 error of the concatenated group outputs.
    pub output_l2: f64,
    pub output_cos: f64,
    /// Mean per-group traffic, token-equivalents.
    pub traffic_tokens: f64,
    pub storage_tokens: f64,
    /// Tokens of the uncompressed sequence at this step.
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mean_recall: f64,
    pub mean_output_l2: f64,
    pub mean_output_cos: f64,
    pub mean_traffic_tokens: f64,
    pub max_traffic_tokens: f64,
    pub mean_storage_tokens: f64,
    /// Largest per-group unique top-k count over the whole session.
    pub unique_topk_count: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub steps: Vec<StepRecord>,
    pub summary: ReportSummary,
}

impl DecodeReport {
    pub fn from_steps(
        steps: Vec<StepRecord>,
        unique_topk_count: usize,
        max_seq_len: usize,
    ) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let summary = ReportSummary {
            mean_recall: mean(|s| s.recall),
            mean_output_l2: mean(|s| s.output_l2),
            mean_output_cos: mean(|s| s.output_cos),
            mean_traffic_tokens: mean(|s| s.traffic_tokens),
            max_traffic_tokens: steps.iter().map(|s| s.traffic_tokens).fold(0.0, f64::max),
            mean_storage_tokens: mean(|s| s.storage_tokens),
            unique_topk_count,
            max_seq_len,
        };
        Self { steps, summary }
    }

    /// Mean recall over the steps of one turn.
    pub fn turn_recall(&self, turn: usize) -> Option<f64> {
        let picked: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.turn == turn)
            .map(|s| s.recall)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}
