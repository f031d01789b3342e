//! `rkv`: command-line front end for the KV-cache compression engine.
//!
//! Every flag can also be set in a TOML file passed with `--config`; keys are
//! the long flag names (`seq-len = 8192`). Flags given on the command line
//! win over the file.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rkv_core::harness::{
    emit_cost_table, generate_workload, read_trace, run_session, sweep, write_session_report,
    write_sweep_report, write_trace, Format, Generator, Method, MethodConfig, SweepGrid,
    WorkloadSpec,
};
use rkv_core::{Error, PoolMode, SplitFactor};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(
    name = "rkv",
    version,
    about = "Two-stage KV cache compression simulator"
)]
struct Cli {
    /// TOML file with default values for any flag.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one decode session on a synthetic workload.
    Simulate(Opts),
    /// Run a grid of methods, budgets and split factors.
    Sweep(Opts),
    /// Print the normalized storage/traffic table.
    CostTable(Opts),
    /// Write a synthetic workload as a trace file.
    GenWorkload(Opts),
    /// Run one decode session on a trace file.
    Ingest(Opts),
}

/// Flags shared by every subcommand; each one mirrors a config-file key.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Opts {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    decode_steps: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    /// New prompt tokens at the start of each later turn.
    #[arg(long)]
    turn_prompt_len: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    heads_per_group: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    page_len: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// `max` or `avg`.
    #[arg(long)]
    pool: Option<String>,
    /// `adaptive` or a real in [0, 1].
    #[arg(long)]
    split_factor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `csv` or `json`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// `gaussian`, `planted-needles` or `shifting-turns`.
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    needles: Option<usize>,
    #[arg(long)]
    needle_margin: Option<f64>,
    #[arg(long)]
    needle_span: Option<usize>,
    #[arg(long)]
    needle_topics: Option<usize>,
    /// Sweep: comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Sweep: comma-separated budgets.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    /// Sweep: comma-separated split factors.
    #[arg(long, value_delimiter = ',')]
    split_factors: Option<Vec<String>>,
    /// Sweep: number of workloads, seeded `seed, seed+1, ...`.
    #[arg(long)]
    seeds: Option<u64>,
    /// Cost table: comma-separated compression ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Ingest: trace file to read.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

macro_rules! merge_fields {
    ($cli:ident, $file:ident; $($f:ident),*) => {
        Opts { $($f: $cli.$f.or($file.$f)),* }
    };
}

impl Opts {
    fn merged(self, file: Opts) -> Opts {
        let cli = self;
        merge_fields!(cli, file; method, budget, seq_len, decode_steps, turns, turn_prompt_len, groups,
            heads_per_group, head_dim, page_len, k1, k2, window, kernel, pool, split_factor, seed, format, out,
            generator, needles, needle_margin, needle_span, needle_topics, methods, budgets, split_factors, seeds,
            ratios, trace)
    }

    fn format(&self) -> Result<Format, CliError> {
        parse(self.format.as_deref().unwrap_or("csv"))
    }

    fn workload(&self, seed: u64) -> Result<WorkloadSpec, CliError> {
        let d = WorkloadSpec::default();
        Ok(WorkloadSpec {
            generator: match &self.generator {
                Some(g) => parse::<Generator>(g)?,
                None => d.generator,
            },
            seq_len: self.seq_len.unwrap_or(d.seq_len),
            decode_steps: self.decode_steps.unwrap_or(d.decode_steps),
            turns: self.turns.unwrap_or(d.turns),
            turn_prompt_len: self.turn_prompt_len.unwrap_or(d.turn_prompt_len),
            groups: self.groups.unwrap_or(d.groups),
            heads_per_group: self.heads_per_group.unwrap_or(d.heads_per_group),
            head_dim: self.head_dim.unwrap_or(d.head_dim),
            needle_count: self.needles.unwrap_or(d.needle_count),
            needle_margin: self.needle_margin.unwrap_or(d.needle_margin),
            needle_span: self.needle_span.unwrap_or(d.needle_span),
            needle_topics: self.needle_topics.unwrap_or(d.needle_topics),
            seed,
        })
    }

    fn method_config(&self) -> Result<MethodConfig, CliError> {
        let method = parse::<Method>(self.method.as_deref().unwrap_or("rocketkv"))?;
        Ok(MethodConfig {
            method,
            budget: self.budget.unwrap_or(256),
            window: self.window,
            kernel: self.kernel,
            pool: parse::<PoolMode>(self.pool.as_deref().unwrap_or("max"))?,
            page_len: self.page_len,
            k1: self.k1,
            k2: self.k2,
            split: parse::<SplitFactor>(self.split_factor.as_deref().unwrap_or("adaptive"))?,
        })
    }
}

fn parse<T>(s: &str) -> Result<T, CliError>
where
    T: std::str::FromStr,
    T::Err: fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| CliError::Config(e.to_string()))
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Core(Error),
    Io(io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Core(e) => match e {
                Error::NumericalFailure { .. } => 3,
                Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::TraceFormat(_) => 4,
                _ => 2,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

fn load_file(path: &Path) -> Result<Opts, CliError> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn with_output(
    out: Option<&Path>,
    body: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn default_ratios() -> Vec<f64> {
    (1..=10).map(|i| f64::from(1u32 << i)).collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => load_file(path)?,
        None => Opts::default(),
    };
    match cli.command {
        Command::Simulate(o) => {
            let o = o.merged(file);
            let spec = o.workload(o.seed.unwrap_or(0))?;
            let cfg = o.method_config()?;
            let report = run_session(&generate_workload(&spec)?, &cfg)?;
            with_output(o.out.as_deref(), |w| {
                Ok(write_session_report(
                    w,
                    o.format()?,
                    Some(&spec),
                    &cfg,
                    &report,
                )?)
            })
        }
        Command::Ingest(o) => {
            let o = o.merged(file);
            let path = o
                .trace
                .as_deref()
                .ok_or_else(|| CliError::Config("ingest needs --trace PATH".into()))?;
            let session = read_trace(&mut io::BufReader::new(File::open(path)?))?;
            let cfg = o.method_config()?;
            let report = run_session(&session, &cfg)?;
            with_output(o.out.as_deref(), |w| {
                Ok(write_session_report(w, o.format()?, None, &cfg, &report)?)
            })
        }
        Command::GenWorkload(o) => {
            let o = o.merged(file);
            let out = o
                .out
                .as_deref()
                .ok_or_else(|| CliError::Config("gen-workload needs --out PATH".into()))?;
            let session = generate_workload(&o.workload(o.seed.unwrap_or(0))?)?;
            with_output(Some(out), |w| Ok(write_trace(w, &session)?))
        }
        Command::CostTable(o) => {
            let o = o.merged(file);
            let ratios = o.ratios.clone().unwrap_or_else(default_ratios);
            with_output(o.out.as_deref(), |w| {
                Ok(emit_cost_table(w, o.format()?, &ratios)?)
            })
        }
        Command::Sweep(o) => {
            let o = o.merged(file);
            let grid = sweep_grid(&o)?;
            let rows = sweep(&grid)?;
            with_output(o.out.as_deref(), |w| {
                Ok(write_sweep_report(w, o.format()?, &rows)?)
            })
        }
    }
}

fn sweep_grid(o: &Opts) -> Result<SweepGrid, CliError> {
    let base = o.method_config()?;
    let first = o.seed.unwrap_or(0);
    let workloads = (first..first + o.seeds.unwrap_or(1))
        .map(|seed| o.workload(seed))
        .collect::<Result<Vec<_>, _>>()?;
    let methods = match &o.methods {
        Some(list) => list
            .iter()
            .map(|m| parse::<Method>(m))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![base.method],
    };
    let splits = match &o.split_factors {
        Some(list) => list
            .iter()
            .map(|s| parse::<SplitFactor>(s))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![base.split],
    };
    Ok(SweepGrid {
        workloads,
        methods,
        budgets: o.budgets.clone().unwrap_or(vec![base.budget]),
        splits,
        base,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rkv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
