//! `taskfuse` command-line tool.
//!
//! Exit status: 0 success, 1 usage error, 2 data/validation error, 3 I/O error.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use taskfuse::analysis::{self, MetricTable, Report, SimilarityMetric};
use taskfuse::error::ErrorKind;
use taskfuse::partition::{self, AssignObjective, PartitionConfig};
use taskfuse::sim::{self, MagnitudeDist, SimConfig};
use taskfuse::validate::{self, Fault, ValidateOptions};
use taskfuse::{
    merge_checkpoints, open_checkpoint, FusionConfig, FusionMode, MissingTensorPolicy,
    TensorFilter, ZeroSignPolicy,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "taskfuse", version, about = "Consensus-filtered task-vector fusion toolkit")]
struct Cli {
    /// Print a one-line JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse task checkpoints onto a base checkpoint.
    Merge(MergeArgs),
    /// Monte Carlo error rates of consensus voting versus averaging.
    Simulate(SimulateArgs),
    /// Tool-aware train/test partitioning of a JSON-lines corpus.
    Partition(PartitionArgs),
    /// Parameter-space similarity between checkpoints.
    Compare(CompareArgs),
    /// Z-scores and AvgZ for a method x task score table.
    Zscore(ZscoreArgs),
    /// Run the built-in self-check battery.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    NoFilter,
    NoWeight,
    Average,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => FusionMode::Full,
            ModeArg::NoFilter => FusionMode::NoFilter,
            ModeArg::NoWeight => FusionMode::NoWeight,
            ModeArg::Average => FusionMode::Average,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MissingArg {
    Passthrough,
    Error,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    /// Task checkpoint; repeat once per task.
    #[arg(long = "task")]
    tasks: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Majority threshold (default K/2).
    #[arg(long)]
    delta: Option<f64>,
    /// Only fuse tensors matching one of these glob patterns.
    #[arg(long = "include")]
    include: Vec<String>,
    /// Copy tensors matching these glob patterns from the base unchanged.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
    #[arg(long, value_enum, default_value = "passthrough")]
    missing: MissingArg,
    /// Treat |tau| below this value as an abstaining vote.
    #[arg(long)]
    zero_eps: Option<f32>,
    /// Write the consensus report as <PATH>.json and <PATH>.csv.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "TASKFUSE_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MagnitudeArg {
    Unit,
    Lognormal,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 5)]
    k: u32,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "lognormal")]
    magnitudes: MagnitudeArg,
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Majority threshold (default K/2).
    #[arg(long)]
    delta: Option<f64>,
    /// Sweep K values, e.g. "k=1,3,5,9,15".
    #[arg(long)]
    sweep: Option<String>,
    /// Independent RNG streams the trials are split across.
    #[arg(long, default_value_t = 1)]
    workers: u32,
    /// Also write <PATH>.json and <PATH>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Lexicographic,
    Sum,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    subsets: usize,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dotted path or JSON pointer to the tool list.
    #[arg(long, default_value = "tools")]
    tools_field: String,
    #[arg(long, default_value = "id")]
    id_field: String,
    /// Assign in input order instead of shuffling.
    #[arg(long)]
    deterministic_order: bool,
    #[arg(long, value_enum, default_value = "lexicographic")]
    objective: ObjectiveArg,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    L2,
    Cosine,
    SignAgreement,
    ParamHistKl,
}

impl From<MetricArg> for SimilarityMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::L2 => SimilarityMetric::L2,
            MetricArg::Cosine => SimilarityMetric::Cosine,
            MetricArg::SignAgreement => SimilarityMetric::SignAgreement,
            MetricArg::ParamHistKl => SimilarityMetric::ParamHistKl,
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    /// Two checkpoints, or more with --matrix.
    #[arg(required = true, num_args = 2..)]
    checkpoints: Vec<PathBuf>,
    /// Emit a pairwise matrix of --metric.
    #[arg(long)]
    matrix: bool,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricArg,
    /// Write <PATH>.json and <PATH>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ZscoreArgs {
    /// CSV with header `method,baseline,<task>...`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

enum Failure {
    Usage(String),
    Core(taskfuse::Error),
    Checks(String),
}

impl From<taskfuse::Error> for Failure {
    fn from(e: taskfuse::Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let json_mode = cli.json;
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(a, json_mode),
        Command::Simulate(a) => cmd_simulate(a, json_mode),
        Command::Partition(a) => cmd_partition(a, json_mode),
        Command::Compare(a) => cmd_compare(a, json_mode),
        Command::Zscore(a) => cmd_zscore(a, json_mode),
        Command::Validate(a) => cmd_validate(a, json_mode),
    };
    match result {
        Ok(summary) => {
            if json_mode {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(failure) => {
            let (code, msg) = match failure {
                Failure::Usage(msg) => (EXIT_USAGE, msg),
                Failure::Checks(msg) => (EXIT_DATA, msg),
                Failure::Core(e) => (
                    match e.kind() {
                        ErrorKind::Usage => EXIT_USAGE,
                        ErrorKind::Data => EXIT_DATA,
                        ErrorKind::Io => EXIT_IO,
                    },
                    e.to_string(),
                ),
            };
            eprintln!("error: {msg}");
            if json_mode {
                println!("{}", json!({ "ok": false, "exit_code": code, "error": msg }));
            }
            ExitCode::from(code)
        }
    }
}

fn usage_for(sub: &str, msg: &str) -> Failure {
    let mut cmd = Cli::command();
    cmd.build();
    let help = cmd
        .find_subcommand_mut(sub)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    Failure::Usage(format!("{msg}\n{help}"))
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start {threads} worker threads: {e}")))
}

fn cmd_merge(args: MergeArgs, json_mode: bool) -> CmdResult {
    if args.tasks.is_empty() {
        return Err(usage_for("merge", "at least one --task is required"));
    }
    let cfg = FusionConfig {
        mode: args.mode.into(),
        delta: args.delta,
        beta: args.beta,
        zero_sign_policy: args
            .zero_eps
            .map_or(ZeroSignPolicy::Positive, ZeroSignPolicy::EpsilonAbstain),
        tensor_filter: TensorFilter::new(&args.include, &args.exclude)?,
        missing_tensor_policy: match args.missing {
            MissingArg::Passthrough => MissingTensorPolicy::Passthrough,
            MissingArg::Error => MissingTensorPolicy::Error,
        },
    };
    let pool = build_pool(args.threads)?;

    let started = Instant::now();
    let base = open_checkpoint(&args.base)?;
    let tasks = args
        .tasks
        .iter()
        .map(open_checkpoint)
        .collect::<taskfuse::Result<Vec<_>>>()?;
    let header_secs = started.elapsed().as_secs_f64();

    let outcome = pool.install(|| merge_checkpoints(&base, &tasks, &cfg, &args.out))?;
    let wall = started.elapsed().as_secs_f64();
    if let Some(path) = &args.report {
        analysis::write_report(&outcome.report, path)?;
    }

    let processed = outcome.bytes_read + outcome.bytes_written;
    let throughput = processed as f64 / wall.max(1e-9) / 1e6;
    if !json_mode {
        println!(
            "merged {} tasks ({} mode): {} tensors written, {} fused, {} elements",
            tasks.len(),
            cfg.mode,
            outcome.tensors_written,
            outcome.tensors_fused,
            outcome.report.d
        );
        println!(
            "time: header {:.3}s, compute {:.3}s, write {:.3}s, wall {:.3}s",
            header_secs,
            outcome.timings.compute.as_secs_f64(),
            outcome.timings.write.as_secs_f64(),
            wall
        );
        println!("bytes processed: {processed} ({throughput:.1} MB/s)");
    }
    Ok(json!({
        "ok": true,
        "command": "merge",
        "out": args.out,
        "k": tasks.len(),
        "mode": cfg.mode,
        "threads": pool.current_num_threads(),
        "tensors_written": outcome.tensors_written,
        "tensors_fused": outcome.tensors_fused,
        "elements": outcome.report.d,
        "branch_counts": outcome.report.branch_counts,
        "bytes_read": outcome.bytes_read,
        "bytes_written": outcome.bytes_written,
        "header_secs": header_secs,
        "compute_secs": outcome.timings.compute.as_secs_f64(),
        "write_secs": outcome.timings.write.as_secs_f64(),
        "wall_secs": wall,
        "throughput_mb_s": throughput,
    }))
}

fn cmd_simulate(args: SimulateArgs, json_mode: bool) -> CmdResult {
    let cfg = SimConfig {
        p: args.p,
        k: args.k,
        delta: args.delta,
        trials: args.trials,
        seed: args.seed,
        magnitudes: match args.magnitudes {
            MagnitudeArg::Unit => MagnitudeDist::Unit,
            MagnitudeArg::Lognormal => MagnitudeDist::LogNormal {
                mu: args.mu,
                sigma: args.sigma,
            },
        },
        workers: args.workers,
    };
    let results = match &args.sweep {
        Some(spec) => sim::sweep(&cfg, &sim::parse_sweep(spec)?)?,
        None => vec![sim::simulate(&cfg)?],
    };
    if let Some(path) = &args.out {
        analysis::write_report(&results, path)?;
    }
    if !json_mode {
        print!("{}", sim::to_csv(&results));
    }
    Ok(json!({ "ok": true, "command": "simulate", "results": results }))
}

fn cmd_partition(args: PartitionArgs, json_mode: bool) -> CmdResult {
    let cfg = PartitionConfig {
        subsets: args.subsets,
        ratio: args.ratio,
        seed: args.seed,
        deterministic_order: args.deterministic_order,
        objective: match args.objective {
            ObjectiveArg::Lexicographic => AssignObjective::Lexicographic,
            ObjectiveArg::Sum => AssignObjective::Sum,
        },
    };
    let file = fs::File::open(&args.input).map_err(|e| io_failure(&args.input, e))?;
    let records = partition::read_jsonl(BufReader::new(file), &args.tools_field, &args.id_field)?;
    let n = records.len();
    let result = partition::partition(records, &cfg)?;

    fs::create_dir_all(&args.outdir).map_err(|e| io_failure(&args.outdir, e))?;
    let mut sizes = Vec::new();
    for (m, split) in result.splits.iter().enumerate() {
        for (kind, recs) in [("train", &split.train), ("test", &split.test)] {
            let path = args.outdir.join(format!("subset_{m}_{kind}.jsonl"));
            fs::write(&path, partition::to_jsonl(recs)).map_err(|e| io_failure(&path, e))?;
        }
        sizes.push(json!({ "subset": m, "train": split.train.len(), "test": split.test.len() }));
    }
    analysis::write_report(&result.overlap, args.outdir.join("overlap"))?;

    if !json_mode {
        println!("partitioned {n} records into {} subsets", result.splits.len());
        for (m, split) in result.splits.iter().enumerate() {
            println!(
                "  subset {m}: {} train, {} test, diagonal overlap {:.1}%",
                split.train.len(),
                split.test.len(),
                result.overlap.get(m, m).percentage
            );
        }
    }
    Ok(json!({
        "ok": true,
        "command": "partition",
        "records": n,
        "subsets": sizes,
        "diagonally_dominant": result.overlap.diagonally_dominant(),
        "outdir": args.outdir,
    }))
}

fn cmd_compare(args: CompareArgs, json_mode: bool) -> CmdResult {
    let ckpts = args
        .checkpoints
        .iter()
        .map(open_checkpoint)
        .collect::<taskfuse::Result<Vec<_>>>()?;
    if args.matrix || ckpts.len() > 2 {
        let labelled: Vec<(String, &taskfuse::Checkpoint)> = args
            .checkpoints
            .iter()
            .zip(&ckpts)
            .map(|(p, c)| (p.display().to_string(), c))
            .collect();
        let m = analysis::similarity_matrix(&labelled, args.metric.into())?;
        if let Some(out) = &args.out {
            analysis::write_report(&m, out)?;
        }
        if !json_mode {
            print!("{}", m.to_csv()?);
        }
        return Ok(json!({ "ok": true, "command": "compare", "matrix": m }));
    }
    let s = analysis::compare_checkpoints(&ckpts[0], &ckpts[1])?;
    if let Some(out) = &args.out {
        analysis::write_report(&s, out)?;
    }
    if !json_mode {
        let g = &s.global;
        println!(
            "l2 {} cosine {} sign_agreement {} param_hist_kl {} / {} over {} elements in {} tensors",
            g.l2,
            g.cosine,
            g.sign_agreement,
            g.param_hist_kl_ab,
            g.param_hist_kl_ba,
            g.elements,
            s.tensors.len()
        );
    }
    Ok(json!({ "ok": true, "command": "compare", "global": s.global }))
}

fn cmd_zscore(args: ZscoreArgs, json_mode: bool) -> CmdResult {
    let file = fs::File::open(&args.input).map_err(|e| io_failure(&args.input, e))?;
    let table = MetricTable::from_csv(file)?;
    let z = analysis::zscores(&table)?;
    if let Some(out) = &args.out {
        analysis::write_report(&z, out)?;
    }
    if !json_mode {
        print!("{}", z.to_csv()?);
    }
    let avg: serde_json::Map<String, serde_json::Value> = z
        .rows
        .iter()
        .map(|r| (r.method.clone(), json!(r.avg_z)))
        .collect();
    Ok(json!({ "ok": true, "command": "zscore", "avg_z": avg }))
}

fn cmd_validate(args: ValidateArgs, json_mode: bool) -> CmdResult {
    let fault = match args.inject_fault.as_deref() {
        None => None,
        Some("flip-mask") => Some(Fault::FlipMask),
        Some(other) => return Err(Failure::Usage(format!("unknown fault {other:?}"))),
    };
    let results = validate::run(&ValidateOptions {
        seed: args.seed,
        instances: args.instances,
        fault,
    });
    if !json_mode {
        for r in &results {
            println!(
                "[{}] {}: {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail
            );
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        if json_mode {
            println!("{}", json!({ "ok": false, "command": "validate", "checks": results }));
        }
        return Err(Failure::Checks(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(json!({ "ok": true, "command": "validate", "checks": results }))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(taskfuse::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
