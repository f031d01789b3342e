//! Dense numeric kernels shared by every stage of the pipeline.
//!
//! Storage is `f32`; reductions that feed a ranking or a normalization are
//! accumulated in `f64`. All kernels are pure functions over slices.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidShape(format!(
                    "ragged rows: expected {cols}, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Appends one row; an empty matrix adopts the row's width.
    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::InvalidShape(format!(
                "row of width {} pushed onto {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; an empty-column matrix has no row data anyway.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Pooling reduction used when smoothing scores along the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Avg,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" => Ok(PoolMode::Avg),
            other => Err(Error::InvalidInput(format!("unknown pool mode `{other}`"))),
        }
    }
}

/// Softmax with max subtraction; exponentials and the normalizer are
/// evaluated in `f64`.
pub fn stable_softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::InvalidShape("softmax of empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
}

/// Descending by score, ascending by index on ties.
fn rank_order<T: PartialOrd>(scores: &[T], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest scores, best first. Ties go to the lower index,
/// so the result is the length-`k` prefix of a stable descending sort.
pub fn argtopk<T: Copy + PartialOrd>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidK {
            k,
            len: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Centered 1-D pooling with truncated edge windows.
pub fn pool1d(scores: &[f32], kernel: usize, mode: PoolMode) -> Result<Vec<f32>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidKernel(kernel));
    }
    let n = scores.len();
    let radius = kernel / 2;
    if radius == 0 {
        return Ok(scores.to_vec());
    }
    match mode {
        PoolMode::Max => {
            let mut out = Vec::with_capacity(n);
            // Monotone deque of indices with decreasing values.
            let mut window: VecDeque<usize> = VecDeque::new();
            let mut next = 0;
            for i in 0..n {
                let hi = (i + radius).min(n - 1);
                while next <= hi {
                    while window.back().is_some_and(|&b| scores[b] <= scores[next]) {
                        window.pop_back();
                    }
                    window.push_back(next);
                    next += 1;
                }
                let lo = i.saturating_sub(radius);
                while window.front().is_some_and(|&f| f < lo) {
                    window.pop_front();
                }
                out.push(scores[*window.front().expect("window covers i")]);
            }
            Ok(out)
        }
        PoolMode::Avg => {
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0.0f64);
            for &s in scores {
                prefix.push(prefix.last().unwrap() + s as f64);
            }
            Ok((0..n)
                .map(|i| {
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius).min(n - 1);
                    ((prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64) as f32
                })
                .collect())
        }
    }
}

/// Folds `x` into element-wise running min/max accumulators.
pub fn running_minmax_update(acc_min: &mut [f32], acc_max: &mut [f32], x: &[f32]) -> Result<()> {
    if acc_min.len() != x.len() || acc_max.len() != x.len() {
        return Err(Error::InvalidShape(format!(
            "min/max accumulators ({}, {}) vs input {}",
            acc_min.len(),
            acc_max.len(),
            x.len()
        )));
    }
    for ((lo, hi), &v) in acc_min.iter_mut().zip(acc_max.iter_mut()).zip(x) {
        *lo = lo.min(v);
        *hi = hi.max(v);
    }
    Ok(())
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Sum over rows of a query group, in `f64`, dimension by dimension.
pub(crate) fn group_sum(q_group: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0f64; q_group.cols()];
    for row in q_group.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc
}
