//! CSV and JSON report emission.
//!
//! Every float is rounded to nine significant digits before serialization,
//! and JSON documents carry a schema version.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::method::MethodConfig;
use crate::harness::sweep::SweepRow;
use crate::harness::workload::WorkloadSpec;
use crate::oracle::{empirical_cdf, CdfPoint, DecodeReport, ReportSummary, StepRecord};
use crate::planner::{cost_row, CostMethod, CostRow};

pub const SCHEMA_VERSION: u32 = 1;

/// Unique top-k indices are counted per attention group.
pub const UNIQUE_TOPK_SCOPE: &str = "per-group";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::InvalidInput(format!("unknown format `{other}`"))),
        }
    }
}

/// Rounds to nine significant digits.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn round_summary(s: &ReportSummary) -> ReportSummary {
    ReportSummary {
        mean_recall: sig9(s.mean_recall),
        mean_output_l2: sig9(s.mean_output_l2),
        mean_output_cos: sig9(s.mean_output_cos),
        mean_traffic_tokens: sig9(s.mean_traffic_tokens),
        max_traffic_tokens: sig9(s.max_traffic_tokens),
        mean_storage_tokens: sig9(s.mean_storage_tokens),
        ..s.clone()
    }
}

fn round_step(s: &StepRecord) -> StepRecord {
    StepRecord {
        recall: sig9(s.recall),
        output_l2: sig9(s.output_l2),
        output_cos: sig9(s.output_cos),
        traffic_tokens: sig9(s.traffic_tokens),
        storage_tokens: sig9(s.storage_tokens),
        ..s.clone()
    }
}

fn write_json<W: Write + ?Sized, T: Serialize>(w: &mut W, doc: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, doc)?;
    w.write_all(b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct SessionDoc<'a> {
    schema_version: u32,
    kind: &'static str,
    unique_topk_scope: &'static str,
    workload: Option<&'a WorkloadSpec>,
    config: &'a MethodConfig,
    summary: ReportSummary,
    steps: Vec<StepRecord>,
}

/// One session's per-step records.
pub fn write_session_report<W: Write + ?Sized>(
    w: &mut W,
    format: Format,
    workload: Option<&WorkloadSpec>,
    config: &MethodConfig,
    report: &DecodeReport,
) -> Result<()> {
    let steps: Vec<StepRecord> = report.steps.iter().map(round_step).collect();
    match format {
        Format::Json => write_json(
            w,
            &SessionDoc {
                schema_version: SCHEMA_VERSION,
                kind: "session",
                unique_topk_scope: UNIQUE_TOPK_SCOPE,
                workload,
                config,
                summary: round_summary(&report.summary),
                steps,
            },
        ),
        Format::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            for s in &steps {
                csv.serialize(s)?;
            }
            csv.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct FlatSweepRow<'a> {
    workload: usize,
    seed: u64,
    seq_len: usize,
    turns: usize,
    method: &'a str,
    budget: usize,
    split: &'a str,
    mean_recall: f64,
    mean_output_l2: f64,
    mean_output_cos: f64,
    mean_traffic_tokens: f64,
    max_traffic_tokens: f64,
    mean_storage_tokens: f64,
    unique_topk_count: usize,
    max_seq_len: usize,
    turn_recall: String,
}

#[derive(Serialize)]
struct SweepDoc {
    schema_version: u32,
    kind: &'static str,
    unique_topk_scope: &'static str,
    rows: Vec<SweepRow>,
}

pub fn write_sweep_report<W: Write + ?Sized>(
    w: &mut W,
    format: Format,
    rows: &[SweepRow],
) -> Result<()> {
    let rows: Vec<SweepRow> = rows
        .iter()
        .map(|r| SweepRow {
            summary: round_summary(&r.summary),
            turn_recall: r.turn_recall.iter().map(|&x| sig9(x)).collect(),
            ..r.clone()
        })
        .collect();
    match format {
        Format::Json => write_json(
            w,
            &SweepDoc {
                schema_version: SCHEMA_VERSION,
                kind: "sweep",
                unique_topk_scope: UNIQUE_TOPK_SCOPE,
                rows,
            },
        ),
        Format::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            for r in &rows {
                let s = &r.summary;
                csv.serialize(FlatSweepRow {
                    workload: r.workload,
                    seed: r.seed,
                    seq_len: r.seq_len,
                    turns: r.turns,
                    method: r.method.name(),
                    budget: r.budget,
                    split: &r.split,
                    mean_recall: s.mean_recall,
                    mean_output_l2: s.mean_output_l2,
                    mean_output_cos: s.mean_output_cos,
                    mean_traffic_tokens: s.mean_traffic_tokens,
                    max_traffic_tokens: s.max_traffic_tokens,
                    mean_storage_tokens: s.mean_storage_tokens,
                    unique_topk_count: s.unique_topk_count,
                    max_seq_len: s.max_seq_len,
                    turn_recall: r
                        .turn_recall
                        .iter()
                        .map(|x| x.to_string())
                        .collect::<Vec<_>>()
                        .join(";"),
                })?;
            }
            csv.flush()?;
            Ok(())
        }
    }
}

/// Cost rows for every method at every ratio, ratio-major.
pub fn cost_table(ratios: &[f64]) -> Result<Vec<CostRow>> {
    let mut rows = Vec::with_capacity(ratios.len() * CostMethod::ALL.len());
    for &c in ratios {
        for m in CostMethod::ALL {
            rows.push(cost_row(m, c)?);
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct FlatCostRow<'a> {
    method: &'a str,
    ratio: f64,
    storage: f64,
    traffic: f64,
}

#[derive(Serialize)]
struct CostDoc<'a> {
    schema_version: u32,
    kind: &'static str,
    rows: Vec<FlatCostRow<'a>>,
}

pub fn emit_cost_table<W: Write + ?Sized>(w: &mut W, format: Format, ratios: &[f64]) -> Result<()> {
    let rows = cost_table(ratios)?;
    let flat: Vec<FlatCostRow> = rows
        .iter()
        .map(|r| FlatCostRow {
            method: r.method.name(),
            ratio: sig9(r.ratio),
            storage: sig9(r.storage),
            traffic: sig9(r.traffic),
        })
        .collect();
    match format {
        Format::Json => write_json(
            w,
            &CostDoc {
                schema_version: SCHEMA_VERSION,
                kind: "cost_table",
                rows: flat,
            },
        ),
        Format::Csv => {
            let mut csv = csv::Writer::from_writer(w);
            for r in &flat {
                csv.serialize(r)?;
            }
            csv.flush()?;
            Ok(())
        }
    }
}

/// CDFs over a suite of sessions of the longest sequence seen and of the
/// unique oracle top-k count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkCdf {
    pub seq_len: Vec<CdfPoint>,
    pub unique_topk: Vec<CdfPoint>,
}

pub fn unique_topk_cdf(summaries: &[ReportSummary]) -> TopkCdf {
    let lens: Vec<f64> = summaries.iter().map(|s| s.max_seq_len as f64).collect();
    let uniq: Vec<f64> = summaries
        .iter()
        .map(|s| s.unique_topk_count as f64)
        .collect();
    TopkCdf {
        seq_len: empirical_cdf(&lens),
        unique_topk: empirical_cdf(&uniq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::method::Method;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.123456789123), 0.123456789);
        assert_eq!(sig9(123456.7891234), 123456.789);
        assert_eq!(sig9(1.0 / 3.0).to_string(), "0.333333333");
        assert_eq!(sig9(0.0), 0.0);
        assert_eq!(sig9(-2.5e-12), -2.5e-12);
        assert!(sig9(f64::NAN).is_nan());
    }

    #[test]
    fn cost_table_csv() {
        let mut buf = Vec::new();
        emit_cost_table(&mut buf, Format::Csv, &[4.0, 64.0]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,ratio,storage,traffic");
        assert_eq!(lines.len(), 1 + 14, "{text}");
        // Full-KV is uncompressed whatever the requested ratio.
        assert!(lines.contains(&"Full-KV,1.0,1.0,1.0"), "{text}");
        assert!(lines.contains(&"SnapKV,4.0,0.25,0.25"));
        let rocket = lines
            .iter()
            .find(|l| l.starts_with("RocketKV,64.0"))
            .unwrap();
        assert!(rocket.starts_with("RocketKV,64.0,0.175"), "{rocket}");
        assert!(rocket.ends_with(",0.015625"));
    }

    #[test]
    fn cost_table_json_versioned() {
        let mut buf = Vec::new();
        emit_cost_table(&mut buf, Format::Json, &[2.0]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["rows"].as_array().unwrap().len(), 7);
        assert!(emit_cost_table(&mut Vec::new(), Format::Csv, &[0.5]).is_err());
    }

    #[test]
    fn session_report_formats() {
        let steps = vec![StepRecord {
            turn: 0,
            step: 0,
            recall: 2.0 / 3.0,
            output_l2: 0.1,
            output_cos: 0.01,
            traffic_tokens: 64.5,
            storage_tokens: 100.0,
            seq_len: 10,
        }];
        let report = DecodeReport::from_steps(steps, 3, 10);
        let cfg = MethodConfig::new(Method::Hsa, 64);
        let mut csv = Vec::new();
        write_session_report(&mut csv, Format::Csv, None, &cfg, &report).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(
            text,
            "turn,step,recall,output_l2,output_cos,traffic_tokens,storage_tokens,seq_len\n\
             0,0,0.666666667,0.1,0.01,64.5,100.0,10\n"
        );
        let mut json = Vec::new();
        write_session_report(&mut json, Format::Json, None, &cfg, &report).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["unique_topk_scope"], "per-group");
        assert_eq!(v["config"]["method"], "hsa");
    }

    #[test]
    fn cdf_over_suite() {
        let mk = |len: usize, uniq: usize| ReportSummary {
            mean_recall: 0.0,
            mean_output_l2: 0.0,
            mean_output_cos: 0.0,
            mean_traffic_tokens: 0.0,
            max_traffic_tokens: 0.0,
            mean_storage_tokens: 0.0,
            unique_topk_count: uniq,
            max_seq_len: len,
        };
        let cdf = unique_topk_cdf(&[mk(100, 10), mk(200, 30), mk(100, 20)]);
        assert_eq!(cdf.seq_len.len(), 2);
        assert_eq!(cdf.seq_len[0].fraction, 2.0 / 3.0);
        assert_eq!(cdf.unique_topk.last().unwrap().fraction, 1.0);
    }
}
