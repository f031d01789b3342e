//! Hybrid sparse attention: per decode step, estimate which tokens matter
//! using `k1` head dimensions of the paged key summaries, fetch the `k2`
//! best tokens and attend over them.
//!
//! All heads of a group share one selection. Dimension ranking uses the
//! group sum of `|q|`; fetch signs and page scores use the group sum of `q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::KvStore;
use crate::numerics::{argtopk, dot_f64, group_sum, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsaConfig {
    /// Head dimensions used for estimation.
    pub k1: usize,
    /// Tokens fetched for attention.
    pub k2: usize,
    pub page_len: usize,
}

/// Selected head dimensions (best first) and the sign of the group-summed
/// query at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct DimSelection {
    pub dims: Vec<usize>,
    pub signs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageScores {
    pub scores: Vec<f64>,
    /// Summary elements read to produce `scores`.
    pub elements_read: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    /// Pages in descending score order.
    pub pages: Vec<usize>,
    /// Store-local token indices, ascending.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationTrace {
    pub dims: Vec<usize>,
    pub signs: Vec<f32>,
    pub page_scores: Vec<f64>,
    pub selected_pages: Vec<usize>,
    pub selected_tokens: Vec<usize>,
    pub estimation_elements: usize,
    pub fetch_elements: usize,
}

fn check_group(q_group: &Matrix, d: usize) -> Result<()> {
    if q_group.rows() == 0 || q_group.cols() != d {
        return Err(Error::InvalidShape(format!(
            "query group is {}x{}, expected Hx{d}",
            q_group.rows(),
            q_group.cols()
        )));
    }
    Ok(())
}

pub fn select_dims(q_group: &Matrix, k1: usize) -> Result<DimSelection> {
    if q_group.rows() == 0 {
        return Err(Error::InvalidShape("empty query group".into()));
    }
    let mut magnitude = vec![0.0f64; q_group.cols()];
    for row in q_group.iter_rows() {
        for (m, &v) in magnitude.iter_mut().zip(row) {
            *m += (v as f64).abs();
        }
    }
    let dims = argtopk(&magnitude, k1)?;
    let summed = group_sum(q_group);
    let signs = dims
        .iter()
        .map(|&j| if summed[j] >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    Ok(DimSelection { dims, signs })
}

/// Upper-bound style page scores: for each selected dimension, the page max
/// (positive sign) or min (negative sign) times the group-summed query.
/// Terms are accumulated in ascending dimension order.
pub fn score_pages(q_group: &Matrix, store: &KvStore, sel: &DimSelection) -> Result<PageScores> {
    check_group(q_group, store.head_dim())?;
    if store.active_len() == 0 {
        return Err(Error::EmptyCache);
    }
    let summed = group_sum(q_group);
    let mut order: Vec<(usize, f32)> = sel
        .dims
        .iter()
        .copied()
        .zip(sel.signs.iter().copied())
        .collect();
    order.sort_unstable_by_key(|&(j, _)| j);

    let pages = store.num_pages();
    let mut scores = vec![0.0f64; pages];
    let mut elements_read = 0;
    for (j, sign) in order {
        let column = if sign >= 0.0 {
            store.page_max_column(j)
        } else {
            store.page_min_column(j)
        };
        for (s, &v) in scores.iter_mut().zip(column) {
            *s += summed[j] * v as f64;
        }
        elements_read += column.len();
    }
    Ok(PageScores {
        scores,
        elements_read,
    })
}

/// Takes whole pages in score order until `k2` tokens are covered; the last
/// page taken keeps only its earliest tokens so exactly
/// `min(k2, active_len)` tokens come back.
pub fn select_tokens(page_scores: &[f64], store: &KvStore, k2: usize) -> Result<TokenSelection> {
    if k2 == 0 {
        return Err(Error::InvalidK {
            k: 0,
            len: store.active_len(),
        });
    }
    if page_scores.len() != store.num_pages() {
        return Err(Error::InvalidShape(format!(
            "{} page scores for {} pages",
            page_scores.len(),
            store.num_pages()
        )));
    }
    if page_scores.is_empty() {
        return Ok(TokenSelection {
            pages: Vec::new(),
            tokens: Vec::new(),
        });
    }
    let target = k2.min(store.active_len());
    let ranked = argtopk(page_scores, page_scores.len())?;
    let mut pages = Vec::new();
    let mut tokens = Vec::with_capacity(target);
    for p in ranked {
        if tokens.len() == target {
            break;
        }
        let room = target - tokens.len();
        let page = store.page_tokens(p);
        tokens.extend_from_slice(&page[..page.len().min(room)]);
        pages.push(p);
    }
    tokens.sort_unstable();
    Ok(TokenSelection { pages, tokens })
}

/// Scaled softmax attention of every head in the group over `idx`.
pub fn sparse_attention(q_group: &Matrix, store: &KvStore, idx: &[usize]) -> Result<Matrix> {
    check_group(q_group, store.head_dim())?;
    if idx.is_empty() {
        return Err(Error::EmptySelection);
    }
    let (keys, values) = store.gather(idx)?;
    attend(q_group, &keys, &values)
}

/// Shared attention kernel: `f64` logits and accumulation, `f32` output.
pub(crate) fn attend(q_group: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    let d = q_group.cols();
    if keys.cols() != d || values.cols() != d || keys.rows() != values.rows() {
        return Err(Error::InvalidShape(format!(
            "attention over K {}x{} / V {}x{} with d={d}",
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    if keys.rows() == 0 {
        return Err(Error::EmptySelection);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q_group.rows(), d);
    let mut logits = vec![0.0f64; keys.rows()];
    for h in 0..q_group.rows() {
        let q = q_group.row(h);
        for (l, k) in logits.iter_mut().zip(keys.iter_rows()) {
            *l = dot_f64(q, k) * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = vec![0.0f64; d];
        let mut total = 0.0f64;
        for (&l, v) in logits.iter().zip(values.iter_rows()) {
            let w = (l - max).exp();
            total += w;
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += w * x as f64;
            }
        }
        for (o, a) in out.row_mut(h).iter_mut().zip(acc) {
            *o = (a / total) as f32;
        }
    }
    Ok(out)
}

/// One full estimation + attention step.
pub fn hsa_step(
    q_group: &Matrix,
    store: &KvStore,
    cfg: &HsaConfig,
) -> Result<(Matrix, EstimationTrace)> {
    if cfg.page_len != store.page_len() {
        return Err(Error::InvalidInput(format!(
            "config page_len {} but store pages are {}",
            cfg.page_len,
            store.page_len()
        )));
    }
    let sel = select_dims(q_group, cfg.k1)?;
    let scored = score_pages(q_group, store, &sel)?;
    let chosen = select_tokens(&scored.scores, store, cfg.k2)?;
    let out = sparse_attention(q_group, store, &chosen.tokens)?;
    let fetch_elements = 2 * store.head_dim() * chosen.tokens.len();
    Ok((
        out,
        EstimationTrace {
            dims: sel.dims,
            signs: sel.signs,
            page_scores: scored.scores,
            selected_pages: chosen.pages,
            selected_tokens: chosen.tokens,
            estimation_elements: scored.elements_read,
            fetch_elements,
        },
    ))
}
