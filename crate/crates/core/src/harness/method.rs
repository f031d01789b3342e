//! Method selection and per-turn resolution into concrete stage configs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsa::HsaConfig;
use crate::kv_store::{GroupLayout, RetentionMode};
use crate::numerics::PoolMode;
use crate::planner::{make_plan_with_split, BudgetPlan, SplitFactor};
use crate::stage1::{
    Stage1Config, MULTI_TURN_WINDOW, PIPELINE_KERNEL, SINGLE_TURN_WINDOW, STANDALONE_KERNEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "full-kv")]
    FullKv,
    #[serde(rename = "exact-topk")]
    ExactTopK,
    #[serde(rename = "snapkv")]
    SnapKv,
    #[serde(rename = "hsa")]
    Hsa,
    #[serde(rename = "quest")]
    QuestLike,
    #[serde(rename = "sparq")]
    SparqLike,
    #[serde(rename = "rocketkv")]
    RocketKv,
    #[serde(rename = "rocketkv-mt")]
    RocketKvMt,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::FullKv,
        Method::ExactTopK,
        Method::SnapKv,
        Method::Hsa,
        Method::QuestLike,
        Method::SparqLike,
        Method::RocketKv,
        Method::RocketKvMt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullKv => "full-kv",
            Method::ExactTopK => "exact-topk",
            Method::SnapKv => "snapkv",
            Method::Hsa => "hsa",
            Method::QuestLike => "quest",
            Method::SparqLike => "sparq",
            Method::RocketKv => "rocketkv",
            Method::RocketKvMt => "rocketkv-mt",
        }
    }

    /// Whether the split factor changes this method's behaviour.
    pub fn uses_split(self) -> bool {
        matches!(self, Method::RocketKv | Method::RocketKvMt)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .or(match key.as_str() {
                "fullkv" | "full" => Some(Method::FullKv),
                "exact" | "exacttopk" | "topk" => Some(Method::ExactTopK),
                "quest-like" => Some(Method::QuestLike),
                "sparq-like" => Some(Method::SparqLike),
                "rocketkv-multi-turn" => Some(Method::RocketKvMt),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Token budget `t` per group and step.
    pub budget: usize,
    pub window: Option<usize>,
    pub kernel: Option<usize>,
    pub pool: PoolMode,
    pub page_len: Option<usize>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub split: SplitFactor,
}

impl MethodConfig {
    pub fn new(method: Method, budget: usize) -> Self {
        Self {
            method,
            budget,
            window: None,
            kernel: None,
            pool: PoolMode::Max,
            page_len: None,
            k1: None,
            k2: None,
            split: SplitFactor::Adaptive,
        }
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.budget < 2 {
            return Err(Error::BudgetTooSmall(self.budget));
        }
        if self.window == Some(0) {
            return Err(Error::InvalidInput("window must be >= 1".into()));
        }
        if let Some(k) = self.kernel {
            if k == 0 || k.is_multiple_of(2) {
                return Err(Error::InvalidKernel(k));
            }
        }
        if self.page_len == Some(0) || self.k2 == Some(0) {
            return Err(Error::InvalidInput("page_len and k2 must be >= 1".into()));
        }
        if let Some(k1) = self.k1 {
            if k1 == 0 || k1 > head_dim {
                return Err(Error::InvalidK {
                    k: k1,
                    len: head_dim,
                });
            }
        }
        self.split.resolve(1.0)?;
        Ok(())
    }

    fn hsa_overrides(&self, base: HsaConfig) -> HsaConfig {
        HsaConfig {
            k1: self.k1.unwrap_or(base.k1),
            k2: self.k2.unwrap_or(base.k2),
            page_len: self.page_len.unwrap_or(base.page_len),
        }
    }
}

/// How each decode step attends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// Dense attention over every active token.
    Dense,
    /// Attention over the exact top-`k` active tokens by group logit.
    Exact { k: usize },
    /// Hybrid sparse attention.
    Sparse(HsaConfig),
}

/// Concrete behaviour of a method for one turn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnPlan {
    pub stage1: Option<Stage1Config>,
    pub retention: RetentionMode,
    pub step: StepKind,
    pub plan: Option<BudgetPlan>,
    /// Accounting multiplier; standalone SnapKV keeps one copy per head.
    pub copies: usize,
}

impl TurnPlan {
    pub fn page_len(&self) -> usize {
        match self.step {
            StepKind::Sparse(cfg) => cfg.page_len,
            _ => 1,
        }
    }

    /// Whether page summaries count towards storage.
    pub fn keeps_summaries(&self) -> bool {
        matches!(self.step, StepKind::Sparse(_))
    }
}

pub fn default_window(turns: usize) -> usize {
    if turns > 1 {
        MULTI_TURN_WINDOW
    } else {
        SINGLE_TURN_WINDOW
    }
}

/// Resolves `cfg` for a turn that starts with `stored` tokens.
pub fn resolve_turn(
    cfg: &MethodConfig,
    layout: &GroupLayout,
    stored: usize,
    turns: usize,
) -> Result<TurnPlan> {
    cfg.validate(layout.head_dim)?;
    let d = layout.head_dim;
    let t = cfg.budget;
    let window = cfg.window.unwrap_or_else(|| default_window(turns));
    let base = TurnPlan {
        stage1: None,
        retention: RetentionMode::Evict,
        step: StepKind::Dense,
        plan: None,
        copies: 1,
    };
    let stage1 = |budget: usize, kernel: usize| {
        (budget < stored).then(|| Stage1Config {
            window: window.min(budget),
            kernel: cfg.kernel.unwrap_or(kernel),
            pool: cfg.pool,
            budget,
        })
    };
    let ratio = stored as f64 / t as f64;
    Ok(match cfg.method {
        Method::FullKv => base,
        Method::ExactTopK => TurnPlan {
            step: StepKind::Exact { k: t },
            ..base
        },
        Method::SnapKv => TurnPlan {
            stage1: stage1((t / layout.heads_per_group).max(1), STANDALONE_KERNEL),
            copies: layout.heads_per_group,
            ..base
        },
        Method::Hsa => {
            let plan = make_plan_with_split(stored, t, d, window, SplitFactor::Fixed(0.0))?;
            sparse_or_dense(cfg, base, plan)
        }
        Method::QuestLike | Method::SparqLike if stored <= t => base,
        Method::QuestLike => TurnPlan {
            step: StepKind::Sparse(cfg.hsa_overrides(HsaConfig {
                k1: d,
                k2: (t / 2).max(1),
                page_len: ratio.ceil() as usize,
            })),
            ..base
        },
        Method::SparqLike => TurnPlan {
            step: StepKind::Sparse(cfg.hsa_overrides(HsaConfig {
                k1: ((d as f64 / ratio).floor() as usize).clamp(1, d),
                k2: (t / 2).max(1),
                page_len: 1,
            })),
            ..base
        },
        Method::RocketKv | Method::RocketKvMt => {
            let plan = make_plan_with_split(stored, t, d, window, cfg.split)?;
            let mut out = sparse_or_dense(cfg, base, plan);
            out.stage1 = stage1(plan.stage1_tokens, PIPELINE_KERNEL);
            if cfg.method == Method::RocketKvMt {
                out.retention = RetentionMode::Filter;
            }
            out
        }
    })
}

fn sparse_or_dense(cfg: &MethodConfig, base: TurnPlan, plan: BudgetPlan) -> TurnPlan {
    TurnPlan {
        step: if plan.is_identity() {
            StepKind::Dense
        } else {
            StepKind::Sparse(cfg.hsa_overrides(plan.hsa_config()))
        },
        plan: Some(plan),
        ..base
    }
}
