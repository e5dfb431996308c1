//! Command-line front end: dataset generation, training, evaluation,
//! identity verification, and selector inspection.
//!
//! Every subcommand ends with one machine-parsable `key=value` line on
//! stdout; progress and diagnostics go to stderr (tune with `SDMTL_LOG` =
//! quiet, info, or debug). Exit codes: 0 success, 1 usage error, 2 runtime
//! error, 3 verification-tolerance failure.

mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::FileConfig;
use sdmtl::datagen::{bayes_optimal_auc, funnel_check_file, generate, GenConfig, GenPaths};
use sdmtl::features::{load_csv, DatasetSchema};
use sdmtl::model::{ForwardCtx, Model};
use sdmtl::pattern_selector::Apem;
use sdmtl::theory::{max_abs_diff, run_suite};
use sdmtl::trainer::checkpoint::Checkpoint;
use sdmtl::trainer::{evaluate, train, Split, TrainConfig};

#[derive(Parser)]
#[command(
    name = "sdmtl",
    version,
    about = "Sequential-dependence multi-task learning on funnel data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic funnel dataset with exact ground truth.
    GenData(GenDataArgs),
    /// Train a model and keep best/last checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one data split.
    Eval(EvalArgs),
    /// Verify the distribution-reweighting identities by exact enumeration.
    VerifyTheory(VerifyTheoryArgs),
    /// Dump selection-rate statistics of a trained selector over a split.
    InspectSelector(InspectSelectorArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the dataset files
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    fields: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    values_per_field: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    /// Comma-separated per-task logit offsets
    #[arg(long)]
    biases: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (schema.txt + train/valid/test.csv)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (metrics.csv, best.ckpt, last.ckpt)
    #[arg(long)]
    out: Option<PathBuf>,
    /// apem | single_task | shared_bottom | mmoe
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dependence-loss strength: one value broadcast, or a comma list per gap
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from out/last.ckpt, appending to metrics.csv
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// train | valid | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct VerifyTheoryArgs {
    /// Number of random joint distributions to enumerate
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Maximum tolerated |lhs - rhs|
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Print every table row, not just failures and the worst case
    #[arg(long)]
    full_table: bool,
}

#[derive(Args)]
struct InspectSelectorArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained selector checkpoint (model must be apem)
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory receiving rates.csv and histogram.csv
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return 1;
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let usage_ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if usage_ok { 0 } else { 1 };
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::VerifyTheory(args) => cmd_verify_theory(args),
        Cmd::InspectSelector(args) => cmd_inspect_selector(args),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            println!("status=error message={msg:?}");
            2
        }
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }
    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
        }
    }
    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("SDMTL_LOG") {
        Err(_) => log::LevelFilter::Info,
        Ok(v) => match v.as_str() {
            "quiet" => log::LevelFilter::Off,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => return Err(format!("SDMTL_LOG={other:?} (expected quiet, info, or debug)")),
        },
    };
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level);
    Ok(())
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, String> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn parse_f64_list(raw: &str, what: &str) -> Result<Vec<f64>, String> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{what}: cannot parse {p:?}: {e}")))
        .collect()
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32, String> {
    let fc = load_file_config(&args.config)?;
    let mut cfg = GenConfig::default();
    fc.apply_gen(&mut cfg)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.rows {
        cfg.rows = v;
    }
    if let Some(v) = args.fields {
        cfg.fields = v;
    }
    if let Some(v) = args.tasks {
        cfg.tasks = v;
    }
    if let Some(v) = args.values_per_field {
        cfg.values_per_field = v;
    }
    if let Some(v) = args.vocab {
        cfg.vocab = v;
    }
    if let Some(v) = args.strength {
        cfg.strength = v;
    }
    if let Some(raw) = &args.biases {
        cfg.biases = parse_f64_list(raw, "--biases")?;
    }
    let out = args
        .out
        .or(fc.out_dir()?)
        .ok_or("gen-data needs --out DIR (or out_dir in the config file)")?;

    let paths: GenPaths = generate(&cfg, &out).map_err(|e| e.to_string())?;
    let schema = DatasetSchema::from_file(&paths.schema).map_err(|e| e.to_string())?;
    let mut violations = 0;
    for p in [&paths.train, &paths.valid, &paths.test] {
        violations += funnel_check_file(p, &schema).map_err(|e| e.to_string())?;
    }
    let mut bayes = Vec::with_capacity(cfg.tasks);
    for task in 0..cfg.tasks {
        bayes.push(
            bayes_optimal_auc(&paths.truth_test, &paths.test, &schema, task)
                .map_err(|e| e.to_string())?,
        );
    }
    log::info!("wrote dataset to {}", out.display());
    let bayes_cols: Vec<String> = bayes
        .iter()
        .enumerate()
        .map(|(t, a)| format!("bayes_auc_{}={a:.6}", t + 1))
        .collect();
    println!(
        "status=ok out={} rows={} fields={} tasks={} seed={} funnel_violations={violations} {}",
        out.display(),
        cfg.rows,
        cfg.fields,
        cfg.tasks,
        cfg.seed,
        bayes_cols.join(" ")
    );
    Ok(0)
}

fn build_train_config(
    config: &Option<PathBuf>,
    data: &Option<PathBuf>,
    model: &Option<String>,
    seed: Option<u64>,
    batch_size: Option<usize>,
) -> Result<TrainConfig, String> {
    let fc = load_file_config(config)?;
    let mut cfg = TrainConfig::default();
    fc.apply_train(&mut cfg)?;
    if let Some(d) = data {
        cfg.data_dir = d.clone();
    }
    if let Some(m) = model {
        cfg.model = m.parse()?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<i32, String> {
    let mut cfg =
        build_train_config(&args.config, &args.data, &args.model, args.seed, args.batch_size)?;
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    if let Some(raw) = &args.sigma {
        cfg.sigmas = parse_f64_list(raw, "--sigma")?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    cfg.resume = args.resume;

    let outcome = train(&cfg).map_err(|e| e.to_string())?;
    println!(
        "status=ok model={} epochs_run={} final_step={} best_epoch={} best_mean_valid_auc={:.6} \
         frozen_gamma={} data_order_hash={:#018x} metrics={} best_ckpt={} last_ckpt={}",
        cfg.model,
        outcome.rows.len(),
        outcome.final_step,
        outcome.best_epoch,
        outcome.best_metric,
        outcome.frozen_gamma,
        outcome.data_order_hash,
        outcome.metrics_path.display(),
        outcome.best_path.display(),
        outcome.last_path.display()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, String> {
    let cfg =
        build_train_config(&args.config, &args.data, &args.model, args.seed, args.batch_size)?;
    let split: Split = args.split.parse()?;
    let report = evaluate(&cfg, &args.ckpt, split).map_err(|e| e.to_string())?;
    let mut cols = vec![format!(
        "status=ok model={} split={} rows={} gamma={}",
        cfg.model, args.split, report.rows, report.gamma
    )];
    for (t, a) in report.auc.iter().enumerate() {
        cols.push(format!("auc_{}={a:.6}", t + 1));
    }
    cols.push(format!("violation_rate={:.6}", report.violation_rate));
    for (t, l) in report.log_loss.iter().enumerate() {
        cols.push(format!("log_loss_{}={l:.6}", t + 1));
    }
    println!("{}", cols.join(" "));
    Ok(0)
}

fn cmd_verify_theory(args: VerifyTheoryArgs) -> Result<i32, String> {
    if args.seeds == 0 {
        return Err("--seeds must be positive".into());
    }
    if !(args.tol.is_finite() && args.tol >= 0.0) {
        return Err(format!("--tol {} must be finite and non-negative", args.tol));
    }
    let rows = run_suite(args.seeds).map_err(|e| e.to_string())?;
    println!("{:>6} {:>8} {:>8} {:>8} {:>22} {:>22} {:>12}", "seed", "support", "theorem", "loss", "lhs", "rhs", "abs_diff");
    let mut failures = 0usize;
    for row in &rows {
        let fails = row.abs_diff > args.tol;
        if fails {
            failures += 1;
        }
        if args.full_table || fails {
            println!(
                "{:>6} {:>8} {:>8} {:>8} {:>22.16} {:>22.16} {:>12.3e}{}",
                row.seed,
                row.support,
                row.theorem,
                row.loss.name(),
                row.lhs,
                row.rhs,
                row.abs_diff,
                if fails { "  FAIL" } else { "" }
            );
        }
    }
    let worst = max_abs_diff(&rows);
    let status = if failures == 0 { "ok" } else { "fail" };
    println!(
        "status={status} seeds={} checks={} failures={failures} max_abs_diff={worst:.3e} tol={:.3e}",
        args.seeds,
        rows.len(),
        args.tol
    );
    Ok(if failures == 0 { 0 } else { 3 })
}

fn cmd_inspect_selector(args: InspectSelectorArgs) -> Result<i32, String> {
    let cfg = build_train_config(&args.config, &args.data, &None, args.seed, args.batch_size)?;
    let split: Split = args.split.parse()?;
    let out = args
        .out
        .ok_or("inspect-selector needs --out DIR for the statistics files")?;

    let schema = DatasetSchema::from_file(&cfg.data_dir.join("schema.txt")).map_err(|e| e.to_string())?;
    let ds = load_csv(&cfg.data_dir.join(split.file_name()), &schema, cfg.funnel_policy)
        .map_err(|e| e.to_string())?;
    if ds.is_empty() {
        return Err(format!("{} is empty", split.file_name()));
    }
    let mut apem = Apem::new(&schema, &cfg.hyper, cfg.seed).map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&args.ckpt).map_err(|e| e.to_string())?;
    ck.warn_if_config_differs(cfg.config_hash());
    ck.restore_params_only(apem.params_mut()).map_err(|e| e.to_string())?;

    let ctx = ForwardCtx { step: ck.state.step, gamma: ck.state.gamma };
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut z_all: Vec<f64> = Vec::with_capacity(ds.len() * apem.num_inducing());
    for chunk in rows.chunks(cfg.batch_size) {
        let batch = ds.batch(chunk);
        let tape = sdmtl::numerics::Tape::new();
        let reg = apem.params().register(&tape);
        let (_preds, trace) =
            apem.forward_traced(&tape, &reg, &batch, &ctx).map_err(|e| e.to_string())?;
        z_all.extend(trace.z.values());
    }
    let stats = sdmtl::asrg::selection_rate_stats(&z_all, ds.len(), apem.num_inducing())
        .map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let rates_path = out.join("rates.csv");
    let hist_path = out.join("histogram.csv");
    std::fs::write(&rates_path, stats.rates_csv()).map_err(|e| e.to_string())?;
    std::fs::write(&hist_path, stats.histogram_csv()).map_err(|e| e.to_string())?;
    println!(
        "status=ok split={} samples={} inducing_points={} gamma={} mean_rate={:.6} median_rate={:.6} rates={} histogram={}",
        args.split,
        ds.len(),
        apem.num_inducing(),
        ck.state.gamma,
        stats.mean,
        stats.median,
        rates_path.display(),
        hist_path.display()
    );
    Ok(0)
}
