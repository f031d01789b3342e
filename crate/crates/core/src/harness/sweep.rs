//! Grid sweeps over workloads, methods, budgets and split factors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::method::{Method, MethodConfig};
use crate::harness::session::run_session;
use crate::harness::workload::{generate_workload, Session, WorkloadSpec};
use crate::oracle::{DecodeReport, ReportSummary};
use crate::planner::SplitFactor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub workloads: Vec<WorkloadSpec>,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub splits: Vec<SplitFactor>,
    /// Overrides shared by every cell; `method`, `budget` and `split` are
    /// replaced per cell.
    pub base: MethodConfig,
}

/// One grid cell. Methods that ignore the split factor get a single cell
/// with the adaptive split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub workload: usize,
    pub config: MethodConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub workload: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub turns: usize,
    pub method: Method,
    pub budget: usize,
    pub split: String,
    pub summary: ReportSummary,
    /// Mean recall per turn.
    pub turn_recall: Vec<f64>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for w in 0..self.workloads.len() {
            for &method in &self.methods {
                for &budget in &self.budgets {
                    let splits: &[SplitFactor] = if method.uses_split() {
                        &self.splits
                    } else {
                        &[SplitFactor::Adaptive]
                    };
                    for &split in splits {
                        out.push(SweepCell {
                            workload: w,
                            config: MethodConfig {
                                method,
                                budget,
                                split,
                                ..self.base
                            },
                        });
                    }
                }
            }
        }
        out
    }
}

pub fn sweep(grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.workloads.is_empty()
        || grid.methods.is_empty()
        || grid.budgets.is_empty()
        || grid.splits.is_empty()
    {
        return Err(Error::InvalidSpec("sweep grid has an empty axis".into()));
    }
    let sessions: Vec<Session> = grid
        .workloads
        .par_iter()
        .map(generate_workload)
        .collect::<Result<_>>()?;
    sweep_sessions(grid, &sessions)
}

/// Runs every cell against pre-built sessions, one per workload.
pub fn sweep_sessions(grid: &SweepGrid, sessions: &[Session]) -> Result<Vec<SweepRow>> {
    let cells = grid.cells();
    cells
        .par_iter()
        .map(|cell| {
            let session = &sessions[cell.workload];
            let report = run_session(session, &cell.config)?;
            Ok(row(grid, cell, session, &report))
        })
        .collect()
}

fn row(grid: &SweepGrid, cell: &SweepCell, session: &Session, report: &DecodeReport) -> SweepRow {
    let spec = &grid.workloads[cell.workload];
    SweepRow {
        workload: cell.workload,
        seed: spec.seed,
        seq_len: session.turns[0].prompt_len,
        turns: session.turns.len(),
        method: cell.config.method,
        budget: cell.config.budget,
        split: cell.config.split.to_string(),
        summary: report.summary.clone(),
        turn_recall: (0..session.turns.len())
            .filter_map(|t| report.turn_recall(t))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::workload::Generator;

    fn grid(methods: Vec<Method>, budgets: Vec<usize>, splits: Vec<SplitFactor>) -> SweepGrid {
        SweepGrid {
            workloads: vec![WorkloadSpec {
                generator: Generator::PlantedNeedles,
                seq_len: 1024,
                decode_steps: 2,
                groups: 1,
                heads_per_group: 2,
                head_dim: 16,
                needle_count: 16,
                needle_span: 4,
                ..WorkloadSpec::default()
            }],
            methods,
            budgets,
            splits,
            base: MethodConfig::new(Method::FullKv, 2),
        }
    }

    #[test]
    fn single_cell_equals_run_session() {
        let g = grid(
            vec![Method::RocketKv],
            vec![128],
            vec![SplitFactor::Adaptive],
        );
        let rows = sweep(&g).unwrap();
        assert_eq!(rows.len(), 1);
        let s = generate_workload(&g.workloads[0]).unwrap();
        let r = run_session(&s, &MethodConfig::new(Method::RocketKv, 128)).unwrap();
        assert_eq!(rows[0].summary, r.summary);
    }

    #[test]
    fn cardinality() {
        let g = grid(
            vec![Method::RocketKv, Method::ExactTopK],
            vec![256, 512],
            vec![SplitFactor::Adaptive],
        );
        assert_eq!(g.cells().len(), 4);
        let mut splits = vec![SplitFactor::Adaptive];
        splits.extend([0.3, 0.4, 0.5, 0.6, 0.7].map(SplitFactor::Fixed));
        let g = grid(vec![Method::RocketKv], vec![128, 256], splits.clone());
        assert_eq!(g.cells().len(), 12);
        let g = grid(vec![Method::ExactTopK], vec![128], splits);
        assert_eq!(g.cells().len(), 1);
    }

    #[test]
    fn ordered_and_deterministic() {
        let g = grid(
            vec![Method::Hsa, Method::RocketKv],
            vec![64, 128],
            vec![SplitFactor::Adaptive],
        );
        let a = sweep(&g).unwrap();
        let b = sweep(&g).unwrap();
        assert_eq!(a, b);
        let order: Vec<(Method, usize)> = a.iter().map(|r| (r.method, r.budget)).collect();
        assert_eq!(
            order,
            vec![
                (Method::Hsa, 64),
                (Method::Hsa, 128),
                (Method::RocketKv, 64),
                (Method::RocketKv, 128)
            ]
        );
    }

    #[test]
    fn empty_axis_rejected() {
        let g = grid(vec![], vec![128], vec![SplitFactor::Adaptive]);
        assert!(sweep(&g).is_err());
    }
}
