//! Decode-session driver: prompt ingest, stage 1, per-step attention and
//! metrics against a dense reference.

use crate::error::{Error, Result};
use crate::harness::method::{resolve_turn, MethodConfig, StepKind, TurnPlan};
use crate::harness::workload::Session;
use crate::hsa::{hsa_step, sparse_attention};
use crate::kv_store::{GroupLayout, KvStore, RetentionMode};
use crate::numerics::Matrix;
use crate::oracle::{
    cosine_distance, dense_attention, exact_topk_indices, recall, relative_l2, DecodeReport,
    StepRecord, UniqueTopkTracker,
};
use crate::stage1::{select_stage1, window_scores};

/// Report plus the raw per-step outputs (groups concatenated, `G*H*d`).
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub report: DecodeReport,
    pub outputs: Vec<Vec<f32>>,
}

struct GroupState {
    store: KvStore,
    ref_keys: Matrix,
    ref_values: Matrix,
    tracker: UniqueTopkTracker,
}

impl GroupState {
    fn push(&mut self, key: &[f32], value: &[f32]) -> Result<()> {
        self.store.append(key, value)?;
        self.ref_keys.push_row(key)?;
        self.ref_values.push_row(value)
    }
}

struct GroupStep {
    output: Matrix,
    recall: f64,
    output_l2: f64,
    output_cos: f64,
    traffic_tokens: f64,
    storage_tokens: f64,
}

/// Recall is measured against the oracle top-`t/2`, the fetch share of the
/// budget, for every method alike.
pub fn recall_k(budget: usize) -> usize {
    (budget / 2).max(1)
}

pub fn run_session(session: &Session, cfg: &MethodConfig) -> Result<DecodeReport> {
    run_session_detailed(session, cfg).map(|o| o.report)
}

pub fn run_session_detailed(session: &Session, cfg: &MethodConfig) -> Result<SessionOutput> {
    session.validate()?;
    let layout = session.layout;
    let d = layout.head_dim;
    cfg.validate(d)?;
    let mut groups = (0..layout.num_groups)
        .map(|_| {
            Ok(GroupState {
                store: KvStore::new(d, 1)?,
                ref_keys: Matrix::zeros(0, d),
                ref_values: Matrix::zeros(0, d),
                tracker: UniqueTopkTracker::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut outputs = Vec::new();
    for (ti, turn) in session.turns.iter().enumerate() {
        for (g, state) in groups.iter_mut().enumerate() {
            for pos in 0..turn.prompt_len {
                state.push(
                    session.prompt_key(ti, pos, g),
                    session.prompt_value(ti, pos, g),
                )?;
            }
        }
        let plan = resolve_turn(cfg, &layout, groups[0].store.len(), session.turns.len())?;
        for (g, state) in groups.iter_mut().enumerate() {
            begin_turn(session, ti, g, &layout, &plan, &mut state.store)?;
        }
        for step in 0..session.decode_steps {
            let mut parts = Vec::with_capacity(layout.num_groups);
            for (g, state) in groups.iter_mut().enumerate() {
                state.push(
                    session.step_key(ti, step, g),
                    session.step_value(ti, step, g),
                )?;
                let q = session.query(ti, step, g);
                parts.push(group_step(&q, state, &plan, cfg.budget)?);
            }
            let n = parts.len() as f64;
            let mean = |f: fn(&GroupStep) -> f64| parts.iter().map(f).sum::<f64>() / n;
            let record = StepRecord {
                turn: ti,
                step,
                recall: mean(|p| p.recall),
                output_l2: mean(|p| p.output_l2),
                output_cos: mean(|p| p.output_cos),
                traffic_tokens: mean(|p| p.traffic_tokens),
                storage_tokens: mean(|p| p.storage_tokens),
                seq_len: groups[0].ref_keys.rows(),
            };
            let flat: Vec<f32> = parts
                .iter()
                .flat_map(|p| p.output.as_slice().iter().copied())
                .collect();
            if flat.iter().any(|x| !x.is_finite())
                || !record.recall.is_finite()
                || !record.output_l2.is_finite()
            {
                return Err(Error::NumericalFailure {
                    step: records.len(),
                });
            }
            records.push(record);
            outputs.push(flat);
        }
    }
    let unique = groups
        .iter()
        .map(|s| s.tracker.unique_count())
        .max()
        .unwrap_or(0);
    let max_len = groups
        .iter()
        .map(|s| s.tracker.max_seq_len())
        .max()
        .unwrap_or(0);
    Ok(SessionOutput {
        report: DecodeReport::from_steps(records, unique, max_len),
        outputs,
    })
}

/// Observation-window queries of a turn. There are no prompt queries in a
/// session, so row `t` reuses the decode query of step `t mod steps`.
pub fn window_queries(session: &Session, turn: usize, group: usize, window: usize) -> Vec<Matrix> {
    (0..window)
        .map(|t| session.query(turn, t % session.decode_steps, group))
        .collect()
}

fn begin_turn(
    session: &Session,
    turn: usize,
    group: usize,
    layout: &GroupLayout,
    plan: &TurnPlan,
    store: &mut KvStore,
) -> Result<()> {
    store.set_page_len(plan.page_len())?;
    match plan.stage1 {
        Some(s1) => {
            let window = s1.window.min(store.len());
            let q = window_queries(session, turn, group, window);
            let scores = window_scores(&q, store, layout)?;
            let keep = select_stage1(&scores, &crate::stage1::Stage1Config { window, ..s1 })?;
            store.apply_retention(&keep, plan.retention)
        }
        // A filtering store re-opens everything it holds at each turn.
        None if plan.retention == RetentionMode::Filter => {
            let all: Vec<usize> = (0..store.len()).collect();
            store.apply_retention(&all, RetentionMode::Filter)
        }
        None => Ok(()),
    }
}

fn group_step(
    q: &Matrix,
    state: &mut GroupState,
    plan: &TurnPlan,
    budget: usize,
) -> Result<GroupStep> {
    let store = &state.store;
    let d2 = (2 * store.head_dim()) as f64;
    let (output, idx, traffic_tokens) = match plan.step {
        StepKind::Dense => {
            let idx = store.active().to_vec();
            let out = sparse_attention(q, store, &idx)?;
            let traffic = (idx.len() * plan.copies) as f64;
            (out, idx, traffic)
        }
        StepKind::Exact { k } => {
            let (keys, _) = store.gather(store.active())?;
            let local = exact_topk_indices(q, &keys, k.min(keys.rows()))?;
            let idx: Vec<usize> = local.iter().map(|&i| store.active()[i]).collect();
            let out = sparse_attention(q, store, &idx)?;
            let traffic = (idx.len() * plan.copies) as f64;
            (out, idx, traffic)
        }
        StepKind::Sparse(cfg) => {
            let (out, trace) = hsa_step(q, store, &cfg)?;
            let traffic =
                trace.estimation_elements as f64 / d2 + trace.selected_tokens.len() as f64;
            (out, trace.selected_tokens, traffic)
        }
    };
    let predicted: Vec<usize> = idx.iter().map(|&i| store.position(i)).collect();

    let reference = dense_attention(q, &state.ref_keys, &state.ref_values)?;
    let total = state.ref_keys.rows();
    let oracle = exact_topk_indices(q, &state.ref_keys, recall_k(budget).min(total))?;
    state.tracker.observe(&oracle, total);

    let mut storage_tokens = (store.len() * plan.copies) as f64;
    if plan.keeps_summaries() {
        storage_tokens += store.summary_elements() as f64 / d2;
    }
    Ok(GroupStep {
        recall: recall(&predicted, &oracle)?,
        output_l2: relative_l2(output.as_slice(), reference.as_slice()),
        output_cos: cosine_distance(output.as_slice(), reference.as_slice()),
        output,
        traffic_tokens,
        storage_tokens,
    })
}
