//! Command-line entry point.
//!
//! `roost run` samples a built-in or bridged target and writes the run
//! artifacts; `roost worker` is the child-process role spawned for
//! multi-process topologies; `roost resume` continues from the latest
//! checkpoint; `roost summarize` turns a trace into plot-ready summaries.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::Command as ProcessCommand;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::engine::{
    load_checkpoint, resolve_checkpoint, run_worker, Checkpoint, RecordSet, RunConfig, RunOutput,
};
use crate::explore::{ExplorerConfig, KernelKind};
use crate::model::TargetSpec;
use crate::transport::{launch_local, worker_rendezvous, ThreadedTransport, DEFAULT_BASE_PORT};

const WORKER_CONFIG_ENV: &str = "ROOST_WORKER_CONFIG";

#[derive(Parser)]
#[command(
    name = "roost",
    about = "Deterministic distributed parallel tempering",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a target and write report, trace, and summary artifacts.
    Run(RunArgs),
    /// Join a multi-process run as a worker (spawned by `run`).
    Worker(WorkerArgs),
    /// Continue a checkpointed run.
    Resume(ResumeArgs),
    /// Summarize a recorded trace into plot-ready files.
    Summarize(SummarizeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetKind {
    Coinflip,
    Bimodal,
    Mvn,
    Bridge,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    /// Sockets when workers > 1, sequential otherwise.
    Auto,
    /// One worker in the calling thread.
    Sequential,
    /// Workers as threads of this process.
    Threads,
    /// Workers as local processes on a TCP mesh.
    Sockets,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExplorerKind {
    Slice,
    Rwm,
}

#[derive(Args, Clone)]
struct TargetArgs {
    /// Target distribution family.
    #[arg(long, value_enum)]
    target: Option<TargetKind>,
    /// coinflip: number of coin tosses.
    #[arg(long, default_value_t = 100_000)]
    n: u64,
    /// coinflip: number of observed heads.
    #[arg(long, default_value_t = 50_000)]
    y: u64,
    /// bimodal: mode separation c (modes at (-c,-c) and (c,c)).
    #[arg(long, default_value_t = 2.0)]
    sep: f64,
    /// bimodal: component standard deviation.
    #[arg(long, default_value_t = 0.5)]
    sd: f64,
    /// mvn/bridge: state dimension.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// mvn: reference standard deviation.
    #[arg(long, default_value_t = 2.0)]
    ref_sd: f64,
    /// bridge: command line of the foreign-process target (space-separated).
    #[arg(long)]
    cmd: Option<String>,
    /// bridge: comma-separated initial state (defaults to the origin).
    #[arg(long)]
    init: Option<String>,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Number of chains on the annealing path.
    #[arg(long, default_value_t = 10)]
    chains: u32,
    /// Number of tuning rounds (round r runs 2^r scans).
    #[arg(long, default_value_t = 10)]
    rounds: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker count (processes or threads, per --backend).
    #[arg(long, default_value_t = 1)]
    workers: u32,
    /// Exploration threads per worker.
    #[arg(long, default_value_t = 1)]
    threads: u32,
    /// Comma-separated recorders: traces,online,round_trip,disk,index (or "none").
    #[arg(long, default_value = "online,round_trip")]
    record: String,
    #[arg(long, default_value = "results")]
    output: PathBuf,
    /// Snapshot the run after every round.
    #[arg(long)]
    checkpoint: bool,
    #[arg(long, value_enum, default_value_t = BackendKind::Auto)]
    backend: BackendKind,
    /// Rendezvous port for the sockets backend (or ROOST_BASE_PORT).
    #[arg(long)]
    base_port: Option<u16>,
    #[arg(long, value_enum, default_value_t = ExplorerKind::Slice)]
    explorer: ExplorerKind,
    #[arg(long, default_value_t = 1.0)]
    slice_width: f64,
    #[arg(long, default_value_t = 0.5)]
    rwm_step: f64,
    /// Kernel sweeps per scan.
    #[arg(long, default_value_t = 3)]
    passes: u32,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct WorkerArgs {
    /// This worker's rank (2..=workers).
    #[arg(long)]
    rank: u32,
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct ResumeArgs {
    /// Checkpoint source: results dir, `latest` pointer, run dir, or file.
    #[arg(long, default_value = "results/latest")]
    from: PathBuf,
    /// Extend or shrink the total number of rounds.
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    workers: Option<u32>,
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Where to write the continued run's artifacts (defaults to the
    /// original output directory).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    base_port: Option<u16>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Directory holding trace.csv (or a direct path to a CSV file).
    #[arg(long, default_value = "results")]
    input: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

/// Serialized hand-off from `run`/`resume` to spawned workers.
#[derive(Serialize, Deserialize)]
struct WorkerPayload {
    config: RunConfig,
    target: TargetSpec,
    workers: u32,
    base_port: u16,
    resume: Option<PathBuf>,
}

struct UsageError(String);
struct RuntimeError(String);

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Worker(args) => cmd_worker(args),
        Command::Resume(args) => cmd_resume(args),
        Command::Summarize(args) => cmd_summarize(args),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(UsageError(msg))) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(CliError::Runtime(RuntimeError(msg))) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

enum CliError {
    Usage(UsageError),
    Runtime(RuntimeError),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e)
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        CliError::Runtime(e)
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(RuntimeError(e.to_string()))
}

fn usage<S: Into<String>>(msg: S) -> CliError {
    CliError::Usage(UsageError(msg.into()))
}

// ---------------------------------------------------------------------------
// argument assembly
// ---------------------------------------------------------------------------

fn build_target(args: &TargetArgs) -> Result<TargetSpec, CliError> {
    let kind = args.target.ok_or_else(|| usage("--target is required"))?;
    let spec = match kind {
        TargetKind::Coinflip => TargetSpec::Coinflip { n: args.n, y: args.y },
        TargetKind::Bimodal => TargetSpec::Bimodal {
            separation: args.sep,
            sd: args.sd,
        },
        TargetKind::Mvn => TargetSpec::Mvn {
            dim: args.dim,
            ref_sd: args.ref_sd,
        },
        TargetKind::Bridge => {
            let cmd = args
                .cmd
                .as_ref()
                .ok_or_else(|| usage("--cmd is required for bridge targets"))?;
            let command: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            let init = match &args.init {
                None => Vec::new(),
                Some(text) => text
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<Vec<f64>, _>>()
                    .map_err(|e| usage(format!("--init: {e}")))?,
            };
            TargetSpec::Bridge {
                command,
                dim: args.dim,
                init,
            }
        }
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn parse_record(text: &str) -> Result<RecordSet, CliError> {
    let mut record = RecordSet {
        traces: false,
        online: false,
        round_trip: false,
        disk: false,
        index: false,
    };
    if text.trim() == "none" || text.trim().is_empty() {
        return Ok(record);
    }
    for token in text.split(',') {
        match token.trim() {
            "traces" => record.traces = true,
            "online" => record.online = true,
            "round_trip" => record.round_trip = true,
            "disk" => record.disk = true,
            "index" => record.index = true,
            other => return Err(usage(format!("unknown recorder {other:?}"))),
        }
    }
    Ok(record)
}

fn build_config(args: &EngineArgs) -> Result<RunConfig, CliError> {
    let explorer = ExplorerConfig {
        kind: match args.explorer {
            ExplorerKind::Slice => KernelKind::Slice,
            ExplorerKind::Rwm => KernelKind::Rwm,
        },
        slice_width: args.slice_width,
        rwm_step: args.rwm_step,
        passes_per_scan: args.passes,
        ..ExplorerConfig::default()
    };
    let config = RunConfig {
        n_chains: args.chains,
        n_rounds: args.rounds,
        seed: args.seed,
        record: parse_record(&args.record)?,
        checkpoint: args.checkpoint,
        explorer,
        output_dir: Some(args.output.clone()),
        n_threads: args.threads,
        force_swap: None,
        quiet: false,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn resolve_base_port(explicit: Option<u16>) -> u16 {
    explicit
        .or_else(|| {
            std::env::var("ROOST_BASE_PORT")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(DEFAULT_BASE_PORT)
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn dispatch(
    config: &RunConfig,
    target: &TargetSpec,
    backend: BackendKind,
    workers: u32,
    base_port: Option<u16>,
    resume: Option<&Checkpoint>,
) -> Result<RunOutput, CliError> {
    if workers < 1 {
        return Err(usage("--workers must be at least 1"));
    }
    let backend = match backend {
        BackendKind::Auto => {
            if workers > 1 {
                BackendKind::Sockets
            } else {
                BackendKind::Sequential
            }
        }
        explicit => explicit,
    };
    match backend {
        BackendKind::Auto => unreachable!(),
        BackendKind::Sequential => {
            if workers != 1 {
                return Err(usage("the sequential backend runs exactly one worker"));
            }
            let mut transport = crate::transport::LocalTransport::new();
            let output = run_worker(config, target, &mut transport, resume).map_err(runtime)?;
            Ok(output.expect("single worker is the root"))
        }
        BackendKind::Threads => {
            let endpoints = ThreadedTransport::create(workers);
            let mut root_output = None;
            std::thread::scope(|scope| -> Result<(), CliError> {
                let mut handles = Vec::new();
                let mut iter = endpoints.into_iter();
                let mut root_endpoint = iter.next().expect("at least one endpoint");
                for mut endpoint in iter {
                    let config = config.clone();
                    let target = target.clone();
                    handles.push(scope.spawn(move || {
                        run_worker(&config, &target, &mut endpoint, resume).map(|_| ())
                    }));
                }
                let root = run_worker(config, target, &mut root_endpoint, resume);
                let mut first_err = None;
                for handle in handles {
                    if let Err(e) = handle.join().expect("worker thread panicked") {
                        first_err.get_or_insert(e);
                    }
                }
                match root {
                    Ok(output) => {
                        if let Some(e) = first_err {
                            return Err(runtime(e));
                        }
                        root_output = output;
                        Ok(())
                    }
                    Err(e) => Err(runtime(e)),
                }
            })?;
            Ok(root_output.expect("rank 1 is the root"))
        }
        BackendKind::Sockets => {
            let port = resolve_base_port(base_port);
            let payload = WorkerPayload {
                config: config.clone(),
                target: target.clone(),
                workers,
                base_port: port,
                resume: resume.and_then(|ck| ck.source_path()),
            };
            if resume.is_some() && payload.resume.is_none() {
                return Err(usage(
                    "multi-process resume needs a checkpoint file on a shared filesystem",
                ));
            }
            let payload_json = serde_json::to_string(&payload).map_err(runtime)?;
            let exe = std::env::current_exe().map_err(runtime)?;
            let output = launch_local(
                workers,
                Some(port),
                |rank, _| {
                    let mut cmd = ProcessCommand::new(&exe);
                    cmd.arg("worker")
                        .arg("--rank")
                        .arg(rank.to_string())
                        .env(WORKER_CONFIG_ENV, &payload_json);
                    cmd
                },
                |transport| run_worker(config, target, transport, resume),
            )
            .map_err(runtime)?
            .map_err(runtime)?;
            Ok(output.expect("rank 1 is the root"))
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<i32, CliError> {
    let target = build_target(&args.target)?;
    let config = build_config(&args.engine)?;
    dispatch(
        &config,
        &target,
        args.engine.backend,
        args.engine.workers,
        args.engine.base_port,
        None,
    )?;
    Ok(0)
}

fn cmd_worker(args: WorkerArgs) -> Result<i32, CliError> {
    if args.rank < 2 {
        return Err(usage("worker ranks start at 2; rank 1 is the launching process"));
    }
    let (config, target, workers, base_port, resume_path) =
        match std::env::var(WORKER_CONFIG_ENV) {
            Ok(json) => {
                let payload: WorkerPayload =
                    serde_json::from_str(&json).map_err(|e| usage(format!("{WORKER_CONFIG_ENV}: {e}")))?;
                (
                    payload.config,
                    payload.target,
                    payload.workers,
                    payload.base_port,
                    payload.resume,
                )
            }
            Err(_) => {
                let target = build_target(&args.target)?;
                let config = build_config(&args.engine)?;
                (
                    config,
                    target,
                    args.engine.workers,
                    resolve_base_port(args.engine.base_port),
                    None,
                )
            }
        };
    if args.rank > workers {
        return Err(usage(format!("rank {} exceeds {} workers", args.rank, workers)));
    }
    let resume = match &resume_path {
        None => None,
        Some(path) => Some(load_checkpoint(path).map_err(runtime)?),
    };
    let mut transport = worker_rendezvous(args.rank, workers, base_port).map_err(runtime)?;
    run_worker(&config, &target, &mut transport, resume.as_ref()).map_err(runtime)?;
    Ok(0)
}

fn cmd_resume(args: ResumeArgs) -> Result<i32, CliError> {
    let ck_path = resolve_checkpoint(&args.from).map_err(runtime)?;
    let ck = load_checkpoint(&ck_path).map_err(runtime)?;
    let mut config = ck.config.clone();
    if let Some(rounds) = args.rounds {
        config.n_rounds = rounds;
    }
    if let Some(output) = &args.output {
        config.output_dir = Some(output.clone());
    }
    config.quiet = false;
    if ck.round >= config.n_rounds {
        println!(
            "nothing to resume: checkpoint already covers round {} of {}",
            ck.round, config.n_rounds
        );
        return Ok(0);
    }
    let workers = args.workers.unwrap_or(1);
    let threads = args.threads;
    if let Some(threads) = threads {
        config.n_threads = threads;
    }
    let backend = args.backend.unwrap_or(BackendKind::Auto);
    dispatch(&config, &ck.target, backend, workers, args.base_port, Some(&ck))?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// summarize
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MarginalSummary {
    name: String,
    mean: f64,
    variance: f64,
    min: f64,
    max: f64,
    bins: usize,
    edges: Vec<f64>,
    counts: Vec<u64>,
}

#[derive(Serialize)]
struct TraceSummary {
    samples: usize,
    marginals: Vec<MarginalSummary>,
}

fn cmd_summarize(args: SummarizeArgs) -> Result<i32, CliError> {
    if args.bins < 1 {
        return Err(usage("--bins must be at least 1"));
    }
    let (trace_path, out_dir) = if args.input.is_file() {
        let dir = args.input.parent().unwrap_or(Path::new(".")).to_path_buf();
        (args.input.clone(), dir)
    } else {
        (args.input.join("trace.csv"), args.input.clone())
    };
    let text = std::fs::read_to_string(&trace_path)
        .map_err(|e| runtime(format!("{}: {e}", trace_path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| runtime("trace is empty"))?;
    let names: Vec<&str> = header.split(',').skip(1).collect();
    if names.is_empty() {
        return Err(runtime("trace header has no coordinate columns"));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() + 1 {
            return Err(runtime(format!("trace row {} is malformed", lineno + 2)));
        }
        for (i, field) in fields[1..].iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|e| runtime(format!("trace row {}: {e}", lineno + 2)))?;
            columns[i].push(v);
        }
    }
    let samples = columns[0].len();
    if samples == 0 {
        return Err(runtime(format!("{}: no samples", trace_path.display())));
    }

    let marginals: Vec<MarginalSummary> = names
        .iter()
        .zip(&columns)
        .map(|(name, values)| summarize_marginal(name, values, args.bins))
        .collect();
    let summary = TraceSummary { samples, marginals };

    let json_path = out_dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary).map_err(runtime)?)
        .map_err(|e| runtime(format!("{}: {e}", json_path.display())))?;

    let dat_path = out_dir.join("summary.dat");
    std::fs::write(&dat_path, gnuplot_histograms(&summary))
        .map_err(|e| runtime(format!("{}: {e}", dat_path.display())))?;

    println!(
        "summarized {} samples over {} marginals -> {}, {}",
        samples,
        summary.marginals.len(),
        json_path.display(),
        dat_path.display()
    );
    Ok(0)
}

fn summarize_marginal(name: &str, values: &[f64], bins: usize) -> MarginalSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| min + i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = if width > 0.0 {
            (((v - min) / width) as usize).min(bins - 1)
        } else {
            0 // constant column: everything lands in the first bin
        };
        counts[idx] += 1;
    }
    MarginalSummary {
        name: name.to_string(),
        mean,
        variance,
        min,
        max,
        bins,
        edges,
        counts,
    }
}

/// One indexed gnuplot block per marginal: `bin_center count`.
fn gnuplot_histograms(summary: &TraceSummary) -> String {
    let mut out = String::new();
    for m in &summary.marginals {
        out.push_str(&format!("# marginal {} (mean {})\n", m.name, m.mean));
        for i in 0..m.bins {
            let center = 0.5 * (m.edges[i] + m.edges[i + 1]);
            out.push_str(&format!("{center} {}\n", m.counts[i]));
        }
        out.push_str("\n\n");
    }
    out
}

impl Checkpoint {
    /// Disk location of this snapshot, when it was loaded from one.
    fn source_path(&self) -> Option<PathBuf> {
        let dir = self.run_dir.as_ref()?;
        let path = dir.join(format!("round_{}", self.round));
        path.is_file().then_some(path)
    }
}
