//! Two-stage KV cache compression for decode-time attention.
//!
//! Stage 1 evicts prompt tokens once, scoring them by the attention an
//! observation window pays them. Stage 2 runs hybrid sparse attention every
//! step: a top-k over head dimensions combined with paged min/max key
//! summaries picks the tokens to attend. The planner splits one token budget
//! between the two, and the harness drives synthetic or recorded sessions
//! against a dense reference.

pub mod error;
pub mod harness;
pub mod hsa;
pub mod kv_store;
pub mod numerics;
pub mod oracle;
pub mod planner;
pub mod stage1;

pub use error::{Error, Result};
pub use hsa::{
    hsa_step, score_pages, select_dims, select_tokens, sparse_attention, EstimationTrace, HsaConfig,
};
pub use kv_store::{GroupLayout, KvStore, RetentionMode};
pub use numerics::{argtopk, pool1d, running_minmax_update, stable_softmax, Matrix, PoolMode};
pub use oracle::{DecodeReport, ReportSummary, StepRecord};
pub use planner::{
    cost_row, make_plan, make_plan_with_split, split_factor, BudgetPlan, CostMethod, CostRow,
    SplitFactor,
};
pub use stage1::{select_stage1, window_scores, Stage1Config};
