//! Synthetic decode sessions.
//!
//! Tensor layout matches the trace file: per turn, prompt keys and values
//! `[P x G x d]`, decode queries `[steps x G x H x d]`, and the key/value of
//! the token produced at each step `[steps x G x d]`.
//!
//! Needle generators plant clusters of "needle" tokens in the first prompt.
//! Each needle belongs to a topic with a unit direction per group; a query
//! aimed at a topic has group sum close to that direction, so the topic's
//! needles dominate the group-summed logits. Background logits are roughly
//! standard normal, which makes `needle_margin` a margin in units of the
//! background spread.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::GroupLayout;
use crate::numerics::Matrix;

// 99th percentile of the standard normal.
const NORMAL_P99: f64 = 2.326_347_874;
const STRENGTH_SLACK: f64 = 0.25;
const QUERY_NOISE: f64 = 0.1;
const MAX_BOOST_PASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Gaussian,
    PlantedNeedles,
    ShiftingTurns,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Generator::Gaussian),
            "planted-needles" | "planted_needles" => Ok(Generator::PlantedNeedles),
            "shifting-turns" | "shifting_turns" => Ok(Generator::ShiftingTurns),
            other => Err(Error::InvalidSpec(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub generator: Generator,
    /// Prompt length of the first turn.
    pub seq_len: usize,
    pub decode_steps: usize,
    pub turns: usize,
    /// New prompt tokens at the start of every later turn.
    pub turn_prompt_len: usize,
    pub groups: usize,
    pub heads_per_group: usize,
    pub head_dim: usize,
    pub needle_count: usize,
    pub needle_margin: f64,
    /// Needles are planted in contiguous runs of this length.
    pub needle_span: usize,
    /// Topics of the planted-needles generator; queries rotate over them
    /// step by step. Shifting turns use one topic per turn instead.
    pub needle_topics: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            generator: Generator::PlantedNeedles,
            seq_len: 4096,
            decode_steps: 16,
            turns: 1,
            turn_prompt_len: 256,
            groups: 2,
            heads_per_group: 4,
            head_dim: 64,
            needle_count: 128,
            needle_margin: 5.0,
            needle_span: 8,
            needle_topics: 2,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn layout(&self) -> Result<GroupLayout> {
        GroupLayout::new(self.groups, self.heads_per_group, self.head_dim)
            .map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    fn topic_count(&self) -> usize {
        match self.generator {
            Generator::Gaussian => 0,
            Generator::PlantedNeedles => self.needle_topics,
            Generator::ShiftingTurns => self.turns,
        }
    }

    fn needle_region(&self) -> usize {
        self.seq_len - self.seq_len / 8
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.seq_len == 0 || self.decode_steps == 0 || self.turns == 0 {
            return bad("seq_len, decode_steps and turns must be >= 1".into());
        }
        if self.turns > 1 && self.turn_prompt_len == 0 {
            return bad("later turns need turn_prompt_len >= 1".into());
        }
        if self.generator == Generator::Gaussian {
            return Ok(());
        }
        if self.needle_count == 0 || self.needle_span == 0 {
            return bad("needle generators need needle_count and needle_span >= 1".into());
        }
        if !(self.needle_margin.is_finite() && self.needle_margin >= 0.0) {
            return bad(format!(
                "needle_margin {} must be finite and >= 0",
                self.needle_margin
            ));
        }
        let topics = self.topic_count();
        if topics == 0 || topics > self.head_dim {
            return bad(format!(
                "{topics} topics need 1..={} head dims",
                self.head_dim
            ));
        }
        let clusters = self.needle_count.div_ceil(self.needle_span);
        if clusters < topics {
            return bad(format!(
                "{clusters} needle clusters cannot cover {topics} topics"
            ));
        }
        if clusters > self.needle_region() / self.needle_span {
            return bad(format!(
                "{} needles in runs of {} do not fit in {} prompt tokens",
                self.needle_count,
                self.needle_span,
                self.needle_region()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub prompt_len: usize,
    pub prompt_keys: Vec<f32>,
    pub prompt_values: Vec<f32>,
    pub queries: Vec<f32>,
    pub step_keys: Vec<f32>,
    pub step_values: Vec<f32>,
}

/// Query, key and value tensors of a whole decode session.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub layout: GroupLayout,
    pub decode_steps: usize,
    pub turns: Vec<Turn>,
}

impl Session {
    fn token_offset(&self, pos: usize, group: usize) -> usize {
        (pos * self.layout.num_groups + group) * self.layout.head_dim
    }

    pub fn prompt_key(&self, turn: usize, pos: usize, group: usize) -> &[f32] {
        let o = self.token_offset(pos, group);
        &self.turns[turn].prompt_keys[o..o + self.layout.head_dim]
    }

    pub fn prompt_value(&self, turn: usize, pos: usize, group: usize) -> &[f32] {
        let o = self.token_offset(pos, group);
        &self.turns[turn].prompt_values[o..o + self.layout.head_dim]
    }

    pub fn step_key(&self, turn: usize, step: usize, group: usize) -> &[f32] {
        let o = self.token_offset(step, group);
        &self.turns[turn].step_keys[o..o + self.layout.head_dim]
    }

    pub fn step_value(&self, turn: usize, step: usize, group: usize) -> &[f32] {
        let o = self.token_offset(step, group);
        &self.turns[turn].step_values[o..o + self.layout.head_dim]
    }

    /// `H x d` query block of one group at one step.
    pub fn query(&self, turn: usize, step: usize, group: usize) -> Matrix {
        let GroupLayout {
            num_groups,
            heads_per_group,
            head_dim,
        } = self.layout;
        let block = heads_per_group * head_dim;
        let o = (step * num_groups + group) * block;
        Matrix::new(
            heads_per_group,
            head_dim,
            self.turns[turn].queries[o..o + block].to_vec(),
        )
        .expect("block has H*d elements")
    }

    /// Checks that every tensor has the length implied by the layout.
    pub fn validate(&self) -> Result<()> {
        let GroupLayout {
            num_groups: g,
            heads_per_group: h,
            head_dim: d,
        } = self.layout;
        let steps = self.decode_steps;
        if self.turns.is_empty() {
            return Err(Error::InvalidSpec("session has no turns".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let ok = t.prompt_keys.len() == t.prompt_len * g * d
                && t.prompt_values.len() == t.prompt_len * g * d
                && t.queries.len() == steps * g * h * d
                && t.step_keys.len() == steps * g * d
                && t.step_values.len() == steps * g * d;
            if !ok {
                return Err(Error::InvalidSpec(format!(
                    "turn {i} tensor sizes disagree with layout"
                )));
            }
        }
        Ok(())
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

/// Orthonormal directions via Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Per-head queries whose group sum is `target`; the per-head parts differ
/// by zero-sum noise.
fn split_over_heads(rng: &mut ChaCha8Rng, target: &[f64], heads: usize) -> Vec<f32> {
    let d = target.len();
    let noise: Vec<Vec<f64>> = (0..heads)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt())
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(heads * d);
    for h in 0..heads {
        for j in 0..d {
            let mean = noise.iter().map(|n| n[j]).sum::<f64>() / heads as f64;
            out.push((target[j] / heads as f64 + noise[h][j] - mean) as f32);
        }
    }
    out
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<Session> {
    spec.validate()?;
    let layout = spec.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.generator {
        Generator::Gaussian => Ok(gaussian_session(spec, layout, &mut rng)),
        Generator::PlantedNeedles | Generator::ShiftingTurns => {
            needle_session(spec, layout, &mut rng)
        }
    }
}

fn gaussian_session(spec: &WorkloadSpec, layout: GroupLayout, rng: &mut ChaCha8Rng) -> Session {
    let (g, h, d, steps) = (
        layout.num_groups,
        layout.heads_per_group,
        layout.head_dim,
        spec.decode_steps,
    );
    let turns = (0..spec.turns)
        .map(|t| {
            let p = if t == 0 {
                spec.seq_len
            } else {
                spec.turn_prompt_len
            };
            Turn {
                prompt_len: p,
                prompt_keys: normals(rng, p * g * d),
                prompt_values: normals(rng, p * g * d),
                queries: normals(rng, steps * g * h * d),
                step_keys: normals(rng, steps * g * d),
                step_values: normals(rng, steps * g * d),
            }
        })
        .collect();
    Session {
        layout,
        decode_steps: steps,
        turns,
    }
}

/// Needle positions (ascending) with the topic of each, as planted by
/// [`generate_workload`] for `spec`. Empty for the gaussian generator.
pub fn needle_layout(spec: &WorkloadSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    if spec.generator == Generator::Gaussian {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(plant_positions(spec, &mut rng))
}

fn plant_positions(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let span = spec.needle_span;
    let clusters = spec.needle_count.div_ceil(span);
    let slots = spec.needle_region() / span;
    let topics = spec.topic_count();
    let picked = sample(rng, slots, clusters).into_vec();
    let mut needles = Vec::with_capacity(spec.needle_count);
    for (c, slot) in picked.into_iter().enumerate() {
        let len = span.min(spec.needle_count - c * span);
        needles.extend((0..len).map(|o| (slot * span + o, c % topics)));
    }
    needles.sort_unstable();
    needles
}

fn needle_session(
    spec: &WorkloadSpec,
    layout: GroupLayout,
    rng: &mut ChaCha8Rng,
) -> Result<Session> {
    let (g, h, d, steps) = (
        layout.num_groups,
        layout.heads_per_group,
        layout.head_dim,
        spec.decode_steps,
    );
    let topics = spec.topic_count();
    let needles = plant_positions(spec, rng);
    let base_strength = spec.needle_margin + NORMAL_P99 + STRENGTH_SLACK;

    let mut turns = Vec::with_capacity(spec.turns);
    for t in 0..spec.turns {
        let p = if t == 0 {
            spec.seq_len
        } else {
            spec.turn_prompt_len
        };
        turns.push(Turn {
            prompt_len: p,
            prompt_keys: normals(rng, p * g * d),
            prompt_values: normals(rng, p * g * d),
            queries: vec![0.0; steps * g * h * d],
            step_keys: normals(rng, steps * g * d),
            step_values: normals(rng, steps * g * d),
        });
    }

    let topic_of = |turn: usize, step: usize| match spec.generator {
        Generator::ShiftingTurns => turn,
        _ => (turn * steps + step) % topics,
    };

    for group in 0..g {
        let dirs = orthonormal(rng, topics, d);
        // Needle keys: background with the topic component replaced by a
        // strength along the topic direction.
        let mut strengths: Vec<f64> = needles
            .iter()
            .map(|_| base_strength + 0.5 * rng.sample::<f64, _>(StandardNormal).abs())
            .collect();
        for t in 0..spec.turns {
            for s in 0..steps {
                let dir = &dirs[topic_of(t, s)];
                let target: Vec<f64> = dir
                    .iter()
                    .map(|&v| {
                        v + QUERY_NOISE * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()
                    })
                    .collect();
                let block = split_over_heads(rng, &target, h);
                let o = (s * g + group) * h * d;
                turns[t].queries[o..o + h * d].copy_from_slice(&block);
            }
        }
        let prompt = &mut turns[0].prompt_keys;
        let write_needles = |prompt: &mut Vec<f32>, strengths: &[f64]| {
            for (n, &(pos, topic)) in needles.iter().enumerate() {
                let o = (pos * g + group) * d;
                let key = &mut prompt[o..o + d];
                let dir = &dirs[topic];
                let along: f64 = key.iter().zip(dir).map(|(&k, &v)| k as f64 * v).sum();
                for (k, &v) in key.iter_mut().zip(dir) {
                    *k = (*k as f64 - along * v + strengths[n] * v) as f32;
                }
            }
        };
        write_needles(prompt, &strengths);

        // Enforce the margin against the realised queries.
        for _ in 0..MAX_BOOST_PASSES {
            let mut boosted = false;
            for t in 0..spec.turns {
                for s in 0..steps {
                    let topic = topic_of(t, s);
                    let shortfall = margin_shortfall(&turns, spec, group, t, s, &needles, topic);
                    if shortfall > 0.0 {
                        for (n, &(_, nt)) in needles.iter().enumerate() {
                            if nt == topic {
                                strengths[n] += shortfall + 0.05;
                            }
                        }
                        boosted = true;
                    }
                }
            }
            if !boosted {
                break;
            }
            write_needles(&mut turns[0].prompt_keys, &strengths);
        }
    }
    Ok(Session {
        layout,
        decode_steps: steps,
        turns,
    })
}

/// How far the weakest active needle falls short of `p99(background) +
/// margin` for one query; non-positive when the margin holds.
fn margin_shortfall(
    turns: &[Turn],
    spec: &WorkloadSpec,
    group: usize,
    turn: usize,
    step: usize,
    needles: &[(usize, usize)],
    topic: usize,
) -> f64 {
    let (g, h, d) = (spec.groups, spec.heads_per_group, spec.head_dim);
    let o = (step * g + group) * h * d;
    let q = &turns[turn].queries[o..o + h * d];
    let summed: Vec<f64> = (0..d)
        .map(|j| (0..h).map(|r| q[r * d + j] as f64).sum())
        .collect();
    let logit = |pos: usize| -> f64 {
        let ko = (pos * g + group) * d;
        summed
            .iter()
            .zip(&turns[0].prompt_keys[ko..ko + d])
            .map(|(&a, &b)| a * b as f64)
            .sum()
    };
    let mut is_needle = vec![false; spec.seq_len];
    for &(pos, _) in needles {
        is_needle[pos] = true;
    }
    let mut background: Vec<f64> = (0..spec.seq_len)
        .filter(|&p| !is_needle[p])
        .map(logit)
        .collect();
    if background.is_empty() {
        return 0.0;
    }
    background.sort_by(|a, b| a.total_cmp(b));
    let p99 = background[((background.len() as f64 * 0.99) as usize).min(background.len() - 1)];
    let weakest = needles
        .iter()
        .filter(|&&(_, t)| t == topic)
        .map(|&(pos, _)| logit(pos))
        .fold(f64::INFINITY, f64::min);
    p99 + spec.needle_margin - weakest
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(generator: Generator) -> WorkloadSpec {
        WorkloadSpec {
            generator,
            seq_len: 512,
            decode_steps: 4,
            turns: 2,
            turn_prompt_len: 32,
            groups: 2,
            heads_per_group: 2,
            head_dim: 16,
            needle_count: 24,
            needle_margin: 5.0,
            needle_span: 4,
            needle_topics: 2,
            seed: 42,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for gen in [
            Generator::Gaussian,
            Generator::PlantedNeedles,
            Generator::ShiftingTurns,
        ] {
            let a = generate_workload(&small(gen)).unwrap();
            let b = generate_workload(&small(gen)).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            let mut other = small(gen);
            other.seed = 43;
            assert_ne!(a, generate_workload(&other).unwrap());
        }
    }

    #[test]
    fn shapes() {
        let s = generate_workload(&small(Generator::PlantedNeedles)).unwrap();
        assert_eq!(s.turns.len(), 2);
        assert_eq!(s.turns[0].prompt_len, 512);
        assert_eq!(s.turns[1].prompt_len, 32);
        assert_eq!(s.query(1, 3, 1).rows(), 2);
        assert_eq!(s.step_key(1, 3, 1).len(), 16);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small(Generator::PlantedNeedles);
        s.groups = 0;
        assert!(matches!(generate_workload(&s), Err(Error::InvalidSpec(_))));
        let mut s = small(Generator::PlantedNeedles);
        s.needle_count = 10_000;
        assert!(matches!(generate_workload(&s), Err(Error::InvalidSpec(_))));
        let mut s = small(Generator::ShiftingTurns);
        s.turns = 40;
        assert!(generate_workload(&s).is_err());
    }

    #[test]
    fn margin_holds_for_every_query() {
        let spec = small(Generator::PlantedNeedles);
        let session = generate_workload(&spec).unwrap();
        let needles = needle_layout(&spec).unwrap();
        assert_eq!(needles.len(), spec.needle_count);
        for group in 0..spec.groups {
            for t in 0..spec.turns {
                for s in 0..spec.decode_steps {
                    let topic = (t * spec.decode_steps + s) % spec.needle_topics;
                    let short =
                        margin_shortfall(&session.turns, &spec, group, t, s, &needles, topic);
                    assert!(short <= 0.0, "group {group} turn {t} step {s}: {short}");
                }
            }
        }
    }

    #[test]
    fn query_group_sum_targets_topic() {
        // With one head the query is the target itself.
        let mut spec = small(Generator::ShiftingTurns);
        spec.heads_per_group = 1;
        let session = generate_workload(&spec).unwrap();
        let q0 = session.query(0, 0, 0);
        let q1 = session.query(1, 0, 0);
        let dot: f64 = q0
            .row(0)
            .iter()
            .zip(q1.row(0))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        // Orthogonal topic directions plus small noise.
        assert!(dot.abs() < 0.2);
    }
}
