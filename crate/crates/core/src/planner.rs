//! Budget decomposition and the normalized storage/traffic cost model.
//!
//! An overall ratio `c = S / t` is split into `c^r` for prompt eviction and
//! `c^(1-r)` for the sparse-attention stage. The latter is split evenly
//! between the sequence dimension (page length, rounded up) and the head
//! dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsa::HsaConfig;
use crate::kv_store::KvStore;

pub const MIN_SPLIT: f64 = 0.2;
pub const MAX_SPLIT: f64 = 0.8;

// Guards `ceil` against values like 3.0000000000000004.
const CEIL_SLACK: f64 = 1e-9;

/// Adaptive split factor `clamp(0.2 + 0.06 * log2(c), 0.2, 0.8)`.
pub fn split_factor(c: f64) -> Result<f64> {
    if c.is_nan() || c < 1.0 || c.is_infinite() {
        return Err(Error::InvalidRatio(c));
    }
    Ok((MIN_SPLIT + 0.06 * c.log2()).clamp(MIN_SPLIT, MAX_SPLIT))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFactor {
    #[default]
    Adaptive,
    Fixed(f64),
}

impl SplitFactor {
    pub fn resolve(self, c: f64) -> Result<f64> {
        match self {
            SplitFactor::Adaptive => split_factor(c),
            SplitFactor::Fixed(r) if (0.0..=1.0).contains(&r) => Ok(r),
            SplitFactor::Fixed(r) => Err(Error::InvalidInput(format!(
                "split factor {r} outside [0, 1]"
            ))),
        }
    }
}

impl std::fmt::Display for SplitFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitFactor::Adaptive => f.write_str("adaptive"),
            SplitFactor::Fixed(r) => write!(f, "{r}"),
        }
    }
}

impl std::str::FromStr for SplitFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(SplitFactor::Adaptive);
        }
        let r: f64 = s
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad split factor `{s}`")))?;
        SplitFactor::Fixed(r).resolve(1.0)?;
        Ok(SplitFactor::Fixed(r))
    }
}

/// All derived quantities for one `(S, t)` pair and head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub seq_len: usize,
    pub budget: usize,
    pub head_dim: usize,
    pub ratio: f64,
    pub split: f64,
    /// Tokens kept by prompt eviction.
    pub stage1_tokens: usize,
    pub page_len: usize,
    pub head_ratio: f64,
    pub k1: usize,
    pub k2: usize,
    pub est_budget: f64,
    pub fetch_budget: f64,
}

impl BudgetPlan {
    /// True when the budget covers the whole sequence: dense attention.
    pub fn is_identity(&self) -> bool {
        self.seq_len <= self.budget
    }

    pub fn stage1_ratio(&self) -> f64 {
        self.ratio.powf(self.split)
    }

    pub fn stage2_ratio(&self) -> f64 {
        self.ratio.powf(1.0 - self.split)
    }

    pub fn hsa_config(&self) -> HsaConfig {
        HsaConfig {
            k1: self.k1,
            k2: self.k2,
            page_len: self.page_len,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

pub fn make_plan(
    seq_len: usize,
    budget: usize,
    head_dim: usize,
    window: usize,
) -> Result<BudgetPlan> {
    make_plan_with_split(seq_len, budget, head_dim, window, SplitFactor::Adaptive)
}

pub fn make_plan_with_split(
    seq_len: usize,
    budget: usize,
    head_dim: usize,
    window: usize,
    split: SplitFactor,
) -> Result<BudgetPlan> {
    if budget < 2 {
        return Err(Error::BudgetTooSmall(budget));
    }
    if seq_len == 0 || head_dim == 0 || window == 0 {
        return Err(Error::InvalidInput(format!(
            "plan needs S, d, w >= 1 (got {seq_len}, {head_dim}, {window})"
        )));
    }
    let half = (budget / 2) as f64;
    if seq_len <= budget {
        return Ok(BudgetPlan {
            seq_len,
            budget,
            head_dim,
            ratio: seq_len as f64 / budget as f64,
            split: split.resolve(1.0)?,
            stage1_tokens: seq_len,
            page_len: 1,
            head_ratio: 1.0,
            k1: head_dim,
            k2: seq_len,
            est_budget: half,
            fetch_budget: half,
        });
    }
    let ratio = seq_len as f64 / budget as f64;
    let r = split.resolve(ratio)?;
    let floor = budget.max(window).min(seq_len);
    let stage1_tokens = round_half_up(seq_len as f64 * ratio.powf(-r)).clamp(floor, seq_len);
    let seq_ratio = ratio.powf((1.0 - r) / 2.0);
    let page_len = ((seq_ratio - CEIL_SLACK).ceil() as usize).max(1);
    let head_ratio = ratio.powf(1.0 - r) / page_len as f64;
    let k1 = round_half_up(head_dim as f64 / head_ratio).clamp(1, head_dim);
    Ok(BudgetPlan {
        seq_len,
        budget,
        head_dim,
        ratio,
        split: r,
        stage1_tokens,
        page_len,
        head_ratio,
        k1,
        k2: (budget / 2).max(1),
        est_budget: half,
        fetch_budget: half,
    })
}

/// Methods of the normalized cost table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostMethod {
    #[serde(rename = "Full-KV")]
    FullKv,
    DuoAttention,
    SnapKV,
    Quest,
    SparQ,
    RocketKV,
    #[serde(rename = "RocketKV-MT")]
    RocketKvMt,
}

impl CostMethod {
    pub const ALL: [CostMethod; 7] = [
        CostMethod::FullKv,
        CostMethod::DuoAttention,
        CostMethod::SnapKV,
        CostMethod::Quest,
        CostMethod::SparQ,
        CostMethod::RocketKV,
        CostMethod::RocketKvMt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostMethod::FullKv => "Full-KV",
            CostMethod::DuoAttention => "DuoAttention",
            CostMethod::SnapKV => "SnapKV",
            CostMethod::Quest => "Quest",
            CostMethod::SparQ => "SparQ",
            CostMethod::RocketKV => "RocketKV",
            CostMethod::RocketKvMt => "RocketKV-MT",
        }
    }
}

/// Storage and traffic normalized to the uncompressed cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: CostMethod,
    pub ratio: f64,
    pub storage: f64,
    pub traffic: f64,
}

pub fn cost_row(method: CostMethod, c: f64) -> Result<CostRow> {
    if c.is_nan() || c < 1.0 || c.is_infinite() {
        return Err(Error::InvalidRatio(c));
    }
    let inv = 1.0 / c;
    let (storage, traffic) = match method {
        CostMethod::FullKv => (1.0, 1.0),
        CostMethod::DuoAttention | CostMethod::SnapKV => (inv, inv),
        CostMethod::Quest => (1.0 + inv, inv),
        CostMethod::SparQ => (2.0, inv),
        CostMethod::RocketKV => {
            let r = split_factor(c)?;
            (c.powf(-r) + 2.0 / c.powf((1.0 + r) / 2.0), inv)
        }
        CostMethod::RocketKvMt => {
            let r = split_factor(c)?;
            (1.0 + 2.0 / c.powf((1.0 + r) / 2.0), inv)
        }
    };
    let ratio = if method == CostMethod::FullKv { 1.0 } else { c };
    Ok(CostRow {
        method,
        ratio,
        storage,
        traffic,
    })
}

/// Per-step traffic of one group, in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepTraffic {
    pub estimation_elements: usize,
    pub fetched_tokens: usize,
}

/// Storage and traffic in token-equivalents (one key plus one value vector,
/// `2d` elements).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub storage_tokens: f64,
    pub traffic_tokens: f64,
}

/// Element-exact footprint of a store after one step. Identity plans run
/// dense attention and keep no summaries.
pub fn measured_footprint(store: &KvStore, plan: &BudgetPlan, traffic: &StepTraffic) -> Footprint {
    let per_token = (2 * store.head_dim()) as f64;
    if plan.is_identity() {
        return Footprint {
            storage_tokens: store.len() as f64,
            traffic_tokens: traffic.fetched_tokens as f64,
        };
    }
    Footprint {
        storage_tokens: store.len() as f64 + store.summary_elements() as f64 / per_token,
        traffic_tokens: traffic.estimation_elements as f64 / per_token
            + traffic.fetched_tokens as f64,
    }
}
