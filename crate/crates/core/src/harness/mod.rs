//! Workload generation, trace I/O, method drivers, sweeps and reports.

pub mod method;
pub mod report;
pub mod session;
pub mod sweep;
pub mod trace;
pub mod workload;

pub use method::{resolve_turn, Method, MethodConfig, StepKind, TurnPlan};
pub use report::{
    cost_table, emit_cost_table, sig9, unique_topk_cdf, write_session_report, write_sweep_report,
    Format, TopkCdf, SCHEMA_VERSION,
};
pub use session::{recall_k, run_session, run_session_detailed, window_queries, SessionOutput};
pub use sweep::{sweep, sweep_sessions, SweepCell, SweepGrid, SweepRow};
pub use trace::{parse_trace, read_trace, write_trace};
pub use workload::{generate_workload, needle_layout, Generator, Session, Turn, WorkloadSpec};
