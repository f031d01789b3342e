//! Coarse-grain prompt selection from observation-window attention.
//!
//! The last `w` queries of the input attend (causally) over the whole
//! input; their probability rows are summed over window rows and over the
//! heads of the group, smoothed with a 1-D pooling pass, and the top
//! `budget - w` positions are kept together with the window itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{GroupLayout, KvStore};
use crate::numerics::{argtopk, dot_f64, pool1d, stable_softmax, Matrix, PoolMode};

pub const SINGLE_TURN_WINDOW: usize = 32;
pub const MULTI_TURN_WINDOW: usize = 128;
/// Pooling kernel used when this stage feeds hybrid sparse attention.
pub const PIPELINE_KERNEL: usize = 63;
/// Pooling kernel of the standalone eviction baseline.
pub const STANDALONE_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub window: usize,
    pub kernel: usize,
    pub pool: PoolMode,
    /// Total retained tokens, window included.
    pub budget: usize,
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidInput(
                "observation window must be >= 1".into(),
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidKernel(self.kernel));
        }
        if self.budget < self.window {
            return Err(Error::InvalidInput(format!(
                "stage-1 budget {} smaller than window {}",
                self.budget, self.window
            )));
        }
        Ok(())
    }
}

/// Summed attention probabilities of the observation window over every
/// stored token of `store`. `q_window[t]` is the `H x d` query block of
/// window row `t`; row `t` sees positions `0..=S-w+t`.
pub fn window_scores(
    q_window: &[Matrix],
    store: &KvStore,
    layout: &GroupLayout,
) -> Result<Vec<f32>> {
    let seq_len = store.len();
    let w = q_window.len();
    if w == 0 {
        return Err(Error::InvalidInput("empty observation window".into()));
    }
    if w > seq_len {
        return Err(Error::InvalidWindow { window: w, seq_len });
    }
    let d = store.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0f64; seq_len];
    let mut logits = Vec::with_capacity(seq_len);
    for (t, block) in q_window.iter().enumerate() {
        if block.rows() != layout.heads_per_group || block.cols() != d {
            return Err(Error::InvalidShape(format!(
                "window query block is {}x{}, expected {}x{}",
                block.rows(),
                block.cols(),
                layout.heads_per_group,
                d
            )));
        }
        let visible = seq_len - w + t + 1;
        for q in block.iter_rows() {
            logits.clear();
            logits.extend((0..visible).map(|i| (dot_f64(q, store.key(i)) * scale) as f32));
            let probs = stable_softmax(&logits)?;
            for (acc, p) in scores.iter_mut().zip(probs) {
                *acc += p as f64;
            }
        }
    }
    Ok(scores.into_iter().map(|s| s as f32).collect())
}

/// Pools the scores of the non-window prefix, keeps the best
/// `budget - window` positions plus the window. Sorted ascending.
pub fn select_stage1(scores: &[f32], cfg: &Stage1Config) -> Result<Vec<usize>> {
    cfg.validate()?;
    let seq_len = scores.len();
    if cfg.budget > seq_len {
        return Err(Error::BudgetExceedsSequence {
            budget: cfg.budget,
            seq_len,
        });
    }
    if cfg.budget == seq_len {
        return Ok((0..seq_len).collect());
    }
    let prefix = seq_len - cfg.window;
    let picks = cfg.budget - cfg.window;
    let mut keep = if picks > 0 {
        let pooled = pool1d(&scores[..prefix], cfg.kernel, cfg.pool)?;
        argtopk(&pooled, picks)?
    } else {
        Vec::new()
    };
    keep.sort_unstable();
    keep.extend(prefix..seq_len);
    Ok(keep)
}
