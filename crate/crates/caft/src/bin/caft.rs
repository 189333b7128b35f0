//! Command-line entry point: corpus synthesis, training, evaluation,
//! benchmarking, parameter accounting, and hyper-parameter sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training
//! divergence, 5 task or dimension mismatch. Results go to stdout,
//! diagnostics to stderr.

use caft::config::{self, ConfigError, RunConfig};
use caft::corpus::{load_corpus, save_corpus, synth_generate, CorpusError, TaskKind};
use caft::model::{count_params, load_checkpoint, save_checkpoint, Mode, ModelError};
use caft::train::{
    bench_inference, evaluate, sweep, train, SweepPoint, TrainError,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "caft", about = "Context-aware fine-tuning over segment streams", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from the [synth] section.
    Synth(SynthArgs),
    /// Train one mode over a corpus, writing checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a corpus.
    Eval(EvalArgs),
    /// Time inference for all three modes over one corpus.
    Bench(BenchArgs),
    /// Report parameter counts and the context-module overhead.
    Params(ParamsArgs),
    /// Train and evaluate across a hyper-parameter grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output corpus directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory produced by `caft synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Mode,
    /// Output directory for checkpoints, metrics.json, and the resolved
    /// config echo.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `caft train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional config supplying the [window] section (injection mode
    /// needs one; other modes ignore it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "ckpt-baseline")]
    ckpt_baseline: PathBuf,
    #[arg(long = "ckpt-injection")]
    ckpt_injection: PathBuf,
    #[arg(long = "ckpt-context")]
    ckpt_context: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional config supplying the [window] section for injection.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Mode whose parameter count is compared against baseline.
    #[arg(long, value_parser = parse_mode, default_value = "context_aware")]
    mode: Mode,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_mode, default_value = "context_aware")]
    mode: Mode,
    /// Grid axis, repeatable. Forms: `alpha=1e-5..1e5:x10`,
    /// `alpha=0.1,1,10`, `D=4,8,16,32,64`,
    /// `window=(2,0),(2,-1),(3,-2),(3,-1),(3,0)`.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

// ── Error handling ───────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bad grid spec {spec:?}: {detail}")]
    Grid { spec: String, detail: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Grid { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Corpus(e) => match e {
                CorpusError::InvalidWindow { .. } | CorpusError::InvalidConfig { .. } => 2,
                _ => 3,
            },
            CliError::Model(e) => match e {
                ModelError::InvalidConfig { .. } => 2,
                ModelError::Io { .. }
                | ModelError::BadMagic { .. }
                | ModelError::BadVersion { .. }
                | ModelError::Truncated { .. }
                | ModelError::Malformed { .. } => 3,
                _ => 5,
            },
            CliError::Train(e) => match e {
                TrainError::Diverged { .. } => 4,
                TrainError::InvalidConfig { .. } => 2,
                TrainError::TaskMismatch { .. } | TrainError::Incompatible { .. } => 5,
                TrainError::Corpus(c) => match c {
                    CorpusError::InvalidWindow { .. } | CorpusError::InvalidConfig { .. } => 2,
                    _ => 3,
                },
                _ => 1,
            },
            CliError::Mismatch(_) => 5,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_ctx<T>(context: impl Into<String>, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io { context: context.into(), source })
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = io_ctx(format!("reading {}", path.display()), std::fs::read_to_string(path))?;
    Ok(config::parse(&text)?)
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("resolved.cfg");
    io_ctx(format!("writing {}", path.display()), std::fs::write(&path, config::serialize(cfg)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Params(args) => cmd_params(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

// ── Commands ─────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let corpus = synth_generate(&cfg.synth)?;
    io_ctx(format!("creating {}", args.out.display()), std::fs::create_dir_all(&args.out))?;
    save_corpus(&corpus, &args.out)?;
    echo_config(&cfg, &args.out)?;
    let frames: usize = corpus.segments().map(|s| s.num_frames()).sum();
    println!("streams={}", corpus.streams.len());
    println!("segments={}", corpus.total_segments());
    println!("frames={}", frames);
    println!("task={}", cfg.synth.task);
    println!("vocab_size={}", cfg.synth.vocab_size());
    println!("out={}", args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = read_config(&args.config)?;
    let corpus = load_corpus(&args.data)?;
    let task = corpus
        .task_kind()
        .ok_or_else(|| CliError::Mismatch("corpus is empty or mixes target kinds".into()))?;

    if args.mode == Mode::Baseline {
        eprintln!("note: [window] is ignored in baseline mode");
    }
    if cfg.train.alpha.is_none() && args.mode == Mode::ContextAware {
        let resolved = cfg.resolved_alpha(task);
        eprintln!("note: alpha defaulted to {}", resolved);
    }
    let train_cfg = cfg.to_train_config(args.mode, task)?;
    // The echo records what actually ran, including the resolved alpha.
    cfg.train.alpha = Some(train_cfg.alpha);

    let outcome = train(&train_cfg, &corpus)?;
    io_ctx(format!("creating {}", args.out.display()), std::fs::create_dir_all(&args.out))?;
    echo_config(&cfg, &args.out)?;
    for run in &outcome.runs {
        let path = args.out.join(format!("seed_{}.ckpt", run.seed));
        save_checkpoint(&run.model, &path)?;
        println!("checkpoint seed={} path={}", run.seed, path.display());
    }
    let json = serde_json::to_string_pretty(&outcome.metrics).expect("metrics serialize");
    let metrics_path = args.out.join("metrics.json");
    io_ctx(format!("writing {}", metrics_path.display()), std::fs::write(&metrics_path, json))?;
    println!("metrics={}", metrics_path.display());

    for seed in &outcome.metrics.per_seed {
        match task {
            TaskKind::Ctc => println!(
                "seed={} token_error_rate={}",
                seed.seed,
                seed.token_error_rate.expect("ctc metric")
            ),
            TaskKind::Classify => {
                println!("seed={} macro_f1={}", seed.seed, seed.macro_f1.expect("classify metric"))
            }
        }
    }
    match task {
        TaskKind::Ctc => {
            let m = outcome.metrics.token_error_rate.expect("ctc metric");
            println!("metric=token_error_rate value={}", m.mean);
        }
        TaskKind::Classify => {
            let m = outcome.metrics.macro_f1.expect("classify metric");
            println!("metric=macro_f1 value={}", m.mean);
        }
    }
    Ok(())
}

fn window_from(config: Option<&Path>) -> Result<caft::corpus::ContextWindowSpec> {
    let settings = match config {
        Some(path) => read_config(path)?.window,
        None => Default::default(),
    };
    Ok(settings.to_spec()?)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.data)?;
    let window = window_from(args.config.as_deref())?;
    let report = evaluate(&model, &corpus, &window)?;
    println!("task={}", report.task);
    println!("mode={}", model.cfg().mode);
    println!("evaluated_segments={}", report.evaluated_segments);
    println!("skipped_segments={}", report.skipped_segments);
    println!("neighbor_reads={}", report.neighbor_reads);
    println!("mean_task_loss={}", report.mean_task_loss);
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("report serialize");
        io_ctx(format!("writing {}", path.display()), std::fs::write(path, json))?;
    }
    match report.task {
        TaskKind::Ctc => {
            println!("metric=token_error_rate value={}", report.token_error_rate.expect("ctc metric"))
        }
        TaskKind::Classify => println!("metric=macro_f1 value={}", report.macro_f1.expect("classify metric")),
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let baseline = load_checkpoint(&args.ckpt_baseline)?;
    let injection = load_checkpoint(&args.ckpt_injection)?;
    let context = load_checkpoint(&args.ckpt_context)?;
    let corpus = load_corpus(&args.data)?;
    let window = window_from(args.config.as_deref())?;
    let report = bench_inference(&baseline, &injection, &context, &corpus, &window)?;
    println!("mode\tseconds_per_segment\tratio_vs_baseline\tsegments_timed");
    for row in &report.rows {
        println!(
            "{}\t{}\t{}\t{}",
            row.mode, row.seconds_per_segment, row.ratio_vs_baseline, row.segments_timed
        );
    }
    Ok(())
}

/// Three significant digits, plain decimal.
fn sig3(x: f64) -> String {
    if x == 0.0 {
        return "0.00".into();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (2 - exponent).max(0) as usize;
    format!("{:.*}", decimals, x)
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    let cfg = read_config(&args.config)?;
    // Task only affects head width through the output vocabulary; counts
    // are reported for the CTC head.
    let model_cfg = cfg.model.to_model_config(args.mode, TaskKind::Ctc);
    let count = count_params(&model_cfg)?;
    let baseline = count.total - count.delta_vs_baseline;
    println!("mode={}", args.mode);
    println!("baseline_params={}", baseline);
    println!("mode_params={}", count.total);
    println!("delta={}", count.delta_vs_baseline);
    let pct = if baseline > 0 { 100.0 * count.delta_vs_baseline as f64 / baseline as f64 } else { 0.0 };
    println!("delta_pct={}%", sig3(pct));
    Ok(())
}

// ── Grid parsing ─────────────────────────────────────────────────────

enum GridAxis {
    Alpha(Vec<f64>),
    Dim(Vec<usize>),
    Window(Vec<(usize, i64)>),
}

fn grid_err(spec: &str, detail: impl Into<String>) -> CliError {
    CliError::Grid { spec: spec.to_string(), detail: detail.into() }
}

fn parse_alpha_axis(spec: &str, body: &str) -> Result<Vec<f64>> {
    if let Some((range, factor)) = body.split_once(":x") {
        let (start, end) = range
            .split_once("..")
            .ok_or_else(|| grid_err(spec, "range form is start..end:xFACTOR"))?;
        let start: f64 = start.parse().map_err(|_| grid_err(spec, "bad range start"))?;
        let end: f64 = end.parse().map_err(|_| grid_err(spec, "bad range end"))?;
        let factor: f64 = factor.parse().map_err(|_| grid_err(spec, "bad range factor"))?;
        if !(start > 0.0 && end >= start && factor > 1.0) {
            return Err(grid_err(spec, "need 0 < start ≤ end and factor > 1"));
        }
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let v = start * factor.powi(k);
            if v > end * (1.0 + 1e-9) {
                break;
            }
            out.push(v);
            k += 1;
        }
        return Ok(out);
    }
    body.split(',')
        .map(|p| p.trim().parse().map_err(|_| grid_err(spec, format!("bad alpha {:?}", p.trim()))))
        .collect()
}

fn parse_window_axis(spec: &str, body: &str) -> Result<Vec<(usize, i64)>> {
    let stripped = body.trim();
    let inner = stripped
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| grid_err(spec, "window form is (L,O),(L,O),…"))?;
    inner
        .split("),(")
        .map(|pair| {
            let (l, o) = pair
                .split_once(',')
                .ok_or_else(|| grid_err(spec, format!("bad window pair {:?}", pair)))?;
            let l = l.trim().parse().map_err(|_| grid_err(spec, format!("bad length {:?}", l)))?;
            let o = o.trim().parse().map_err(|_| grid_err(spec, format!("bad offset {:?}", o)))?;
            Ok((l, o))
        })
        .collect()
}

fn parse_grid_axis(spec: &str) -> Result<GridAxis> {
    let (name, body) = spec.split_once('=').ok_or_else(|| grid_err(spec, "expected axis=values"))?;
    match name.trim() {
        "alpha" => Ok(GridAxis::Alpha(parse_alpha_axis(spec, body.trim())?)),
        "D" => Ok(GridAxis::Dim(
            body.split(',')
                .map(|p| p.trim().parse().map_err(|_| grid_err(spec, format!("bad dim {:?}", p.trim()))))
                .collect::<Result<_>>()?,
        )),
        "window" => Ok(GridAxis::Window(parse_window_axis(spec, body.trim())?)),
        other => Err(grid_err(spec, format!("unknown axis {:?} (expected alpha, D, or window)", other))),
    }
}

fn expand_grid(base: &SweepPoint, axes: &[GridAxis]) -> Vec<SweepPoint> {
    let mut points = vec![base.clone()];
    for axis in axes {
        let mut next = Vec::new();
        for p in &points {
            match axis {
                GridAxis::Alpha(vals) => {
                    for &alpha in vals {
                        next.push(SweepPoint { alpha, ..p.clone() });
                    }
                }
                GridAxis::Dim(vals) => {
                    for &context_dim in vals {
                        next.push(SweepPoint { context_dim, ..p.clone() });
                    }
                }
                GridAxis::Window(vals) => {
                    for &(window_length, window_offset) in vals {
                        next.push(SweepPoint { window_length, window_offset, ..p.clone() });
                    }
                }
            }
        }
        points = next;
    }
    points
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.jobs == 0 {
        return Err(grid_err("--jobs", "must be ≥ 1"));
    }
    let cfg = read_config(&args.config)?;
    let corpus = load_corpus(&args.data)?;
    let task = corpus
        .task_kind()
        .ok_or_else(|| CliError::Mismatch("corpus is empty or mixes target kinds".into()))?;
    let base_cfg = cfg.to_train_config(args.mode, task)?;
    let base_point = SweepPoint {
        alpha: base_cfg.alpha,
        context_dim: base_cfg.model.context_dim,
        window_length: base_cfg.window.length(),
        window_offset: base_cfg.window.offset(),
    };
    let axes: Vec<GridAxis> = args.grid.iter().map(|s| parse_grid_axis(s)).collect::<Result<_>>()?;
    let points = expand_grid(&base_point, &axes);
    if points.is_empty() {
        return Err(grid_err("--grid", "grid expands to zero points"));
    }

    let table = sweep(&base_cfg, &points, &corpus, args.jobs)?;
    if table.duplicates_removed > 0 {
        eprintln!("warning: {} duplicate grid point(s) removed", table.duplicates_removed);
    }

    io_ctx(format!("creating {}", args.out.display()), std::fs::create_dir_all(&args.out))?;
    let mut echoed = cfg.clone();
    echoed.train.alpha = Some(base_cfg.alpha);
    echo_config(&echoed, &args.out)?;
    let mut tsv = String::from("alpha\tcontext_dim\twindow_length\twindow_offset\tseed\ttoken_error_rate\tmacro_f1\tfinal_task_loss\tfinal_context_loss\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &table.rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.point.alpha,
            row.point.context_dim,
            row.point.window_length,
            row.point.window_offset,
            row.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into()),
            opt(row.token_error_rate),
            opt(row.macro_f1),
            row.final_task_loss,
            row.final_context_loss,
        ));
    }
    let tsv_path = args.out.join("sweep.tsv");
    io_ctx(format!("writing {}", tsv_path.display()), std::fs::write(&tsv_path, &tsv))?;
    println!("points={}", points.len() - table.duplicates_removed);
    println!("rows={}", table.rows.len());
    println!("out={}", tsv_path.display());
    for row in table.rows.iter().filter(|r| r.seed.is_none()) {
        let metric = match task {
            TaskKind::Ctc => format!("token_error_rate={}", opt(row.token_error_rate)),
            TaskKind::Classify => format!("macro_f1={}", opt(row.macro_f1)),
        };
        println!(
            "point alpha={} D={} window=({},{}) {}",
            row.point.alpha, row.point.context_dim, row.point.window_length, row.point.window_offset, metric
        );
    }
    Ok(())
}
