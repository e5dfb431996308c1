//! Deterministic training loop shared by every model.
//!
//! One Adam optimizer, per-epoch data order derived from (seed, epoch) so a
//! resumed run replays exactly the order the uninterrupted run would have
//! used, per-epoch validation metrics appended to a CSV, and best/last
//! checkpoints. Only the forward function differs between models; everything
//! else — batching, loss, metrics, persistence — is this module, which is what
//! makes model comparisons a one-flag swap.

pub mod adam;
pub mod checkpoint;
pub mod metrics;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::asrg::gamma_at;
use crate::features::{fnv1a64, load_csv, Dataset, DatasetSchema, FeatureError, FunnelPolicy};
use crate::losses::{total_loss, LossError};
use crate::model::{build_model, ForwardCtx, Model, ModelError, ModelHyper, ModelKind};
use adam::Adam;
use checkpoint::{config_hash, Checkpoint, CheckpointError, RunState};
use metrics::{auc, log_loss, violation_rate, MetricsError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Which split file of a dataset directory to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Valid => "valid.csv",
            Split::Test => "test.csv",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train|valid|test)")),
        }
    }
}

/// Full training-run configuration. Defaults: batch 1024, learning rate 1e-3,
/// and the model defaults in [`ModelHyper`] (embedding width 18, 2 heads, 64
/// inducing rows, 4 selection layers).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: u64,
    pub seed: u64,
    /// Per-task main-loss weights. Empty = 1 for every task; a single value
    /// broadcasts.
    pub weights: Vec<f64>,
    /// Per-gap dependence-loss strengths (one per adjacent task pair). Empty =
    /// 1 for every gap; a single value broadcasts.
    pub sigmas: Vec<f64>,
    pub hyper: ModelHyper,
    pub funnel_policy: FunnelPolicy,
    /// Directory holding schema.txt and train/valid/test.csv.
    pub data_dir: PathBuf,
    /// Directory receiving metrics.csv, best.ckpt, last.ckpt.
    pub out_dir: PathBuf,
    /// Continue from out_dir/last.ckpt if present, appending to metrics.csv.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Apem,
            batch_size: 1024,
            lr: 1e-3,
            epochs: 10,
            seed: 0,
            weights: Vec::new(),
            sigmas: Vec::new(),
            hyper: ModelHyper::default(),
            funnel_policy: FunnelPolicy::RejectFile,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            resume: false,
        }
    }
}

fn join_f64(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn join_usize(vals: &[usize]) -> String {
    vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Canonical text form of everything that shapes the training trajectory.
    /// Epoch count and output paths are deliberately absent: extending a run
    /// or relocating its outputs is still the same run.
    pub fn canonical_string(&self) -> String {
        let h = &self.hyper;
        [
            format!("model={}", self.model),
            format!("batch_size={}", self.batch_size),
            format!("lr={}", self.lr),
            format!("seed={}", self.seed),
            format!("weights={}", join_f64(&self.weights)),
            format!("sigmas={}", join_f64(&self.sigmas)),
            format!("embed_dim={}", h.embed_dim),
            format!("heads={}", h.heads),
            format!("inducing_points={}", h.inducing_points),
            format!("ps_layers={}", h.ps_layers),
            format!("selector_hidden={}", join_usize(&h.selector_hidden)),
            format!("tower_hidden={}", h.tower_hidden),
            format!("single_hidden={}", join_usize(&h.single_hidden)),
            format!("bottom_hidden={}", join_usize(&h.bottom_hidden)),
            format!("expert_count={}", h.expert_count),
            format!("expert_dim={}", h.expert_dim),
            format!("expert_hidden={}", h.expert_hidden),
            format!("funnel_policy={}", self.funnel_policy),
            format!("data_dir={}", self.data_dir.display()),
        ]
        .join("\n")
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.canonical_string())
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} is not positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics row — everything logged at the end of an epoch.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: u64,
    pub step: u64,
    pub train_total: f64,
    pub train_main: Vec<f64>,
    pub train_dep: Vec<f64>,
    pub valid_auc: Vec<f64>,
    pub valid_violation_rate: f64,
}

impl EpochRow {
    pub fn csv_header(n_tasks: usize) -> String {
        let mut cols = vec!["epoch".to_string(), "step".to_string(), "train_total".to_string()];
        cols.extend((1..=n_tasks).map(|t| format!("train_main_{t}")));
        cols.extend((2..=n_tasks).map(|t| format!("train_dep_{t}")));
        cols.extend((1..=n_tasks).map(|t| format!("valid_auc_{t}")));
        cols.push("valid_violation_rate".to_string());
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let mut cols = vec![
            format!("{}", self.epoch),
            format!("{}", self.step),
            format!("{}", self.train_total),
        ];
        cols.extend(self.train_main.iter().map(|v| format!("{v}")));
        cols.extend(self.train_dep.iter().map(|v| format!("{v}")));
        cols.extend(self.valid_auc.iter().map(|v| format!("{v}")));
        cols.push(format!("{}", self.valid_violation_rate));
        cols.join(",")
    }
}

/// What a completed [`train`] call hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Rows produced by this call (a resumed call reports only its own epochs).
    pub rows: Vec<EpochRow>,
    pub best_metric: f64,
    pub best_epoch: u64,
    pub final_step: u64,
    /// Annealing temperature at the final step; stored in checkpoints and used
    /// for all inference.
    pub frozen_gamma: f64,
    /// Hash of the exact row visit order across this call's epochs. Two runs
    /// that differ only in model produce the same hash — the data path is
    /// model-independent.
    pub data_order_hash: u64,
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// Shuffled row order for one epoch, a pure function of (seed, epoch, n).
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut bytes = Vec::with_capacity(16);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&epoch.to_le_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&bytes));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn resolve_per_task(vals: &[f64], n: usize, what: &str) -> Result<Vec<f64>, TrainError> {
    match vals.len() {
        0 => Ok(vec![1.0; n]),
        1 => Ok(vec![vals[0]; n]),
        l if l == n => Ok(vals.to_vec()),
        l => Err(TrainError::Config(format!("{what}: got {l} values, expected {n} (or 1 to broadcast)"))),
    }
}

fn load_split(cfg: &TrainConfig, schema: &DatasetSchema, split: Split) -> Result<Dataset, TrainError> {
    Ok(load_csv(&cfg.data_dir.join(split.file_name()), schema, cfg.funnel_policy)?)
}

fn load_schema(cfg: &TrainConfig) -> Result<DatasetSchema, TrainError> {
    Ok(DatasetSchema::from_file(&cfg.data_dir.join("schema.txt"))?)
}

/// Predictions over a whole dataset in row order, one vector per task, under a
/// fixed annealing temperature.
pub fn predict(
    model: &dyn Model,
    ds: &Dataset,
    batch_size: usize,
    step: u64,
    gamma: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(ds.len()); model.num_tasks()];
    let rows: Vec<usize> = (0..ds.len()).collect();
    let ctx = ForwardCtx { step, gamma };
    for chunk in rows.chunks(batch_size) {
        let batch = ds.batch(chunk);
        let tape = crate::numerics::Tape::new();
        let reg = model.params().register(&tape);
        let preds = model.forward(&tape, &reg, &batch, &ctx)?;
        for (task, p) in preds.iter().enumerate() {
            out[task].extend(p.values());
        }
    }
    Ok(out)
}

/// Loss of the very first training batch before any update — useful for
/// checking that a knob affects what it should and nothing else.
pub fn initial_loss(cfg: &TrainConfig) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
    cfg.validate()?;
    let schema = load_schema(cfg)?;
    let train_ds = load_split(cfg, &schema, Split::Train)?;
    let n_tasks = schema.num_tasks();
    let weights = resolve_per_task(&cfg.weights, n_tasks, "weights")?;
    let sigmas = resolve_per_task(&cfg.sigmas, n_tasks - 1, "sigmas")?;
    let model = build_model(cfg.model, &schema, &cfg.hyper, cfg.seed)?;
    let order = epoch_order(cfg.seed, 0, train_ds.len());
    let first: Vec<usize> = order.iter().take(cfg.batch_size).copied().collect();
    let batch = train_ds.batch(&first);
    let tape = crate::numerics::Tape::new();
    let reg = model.params().register(&tape);
    let ctx = ForwardCtx { step: 0, gamma: gamma_at(0) };
    let preds = model.forward(&tape, &reg, &batch, &ctx)?;
    let report = total_loss(&preds, &batch.labels, &weights, &sigmas)?;
    Ok((report.total.item(), report.main_values(), report.dep_values()))
}

/// Run (or resume) training to `cfg.epochs` epochs. Appends one metrics row
/// per epoch, keeps the best checkpoint by mean validation AUC, and always
/// leaves a resumable last.ckpt.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let schema = load_schema(cfg)?;
    let train_ds = load_split(cfg, &schema, Split::Train)?;
    let valid_ds = load_split(cfg, &schema, Split::Valid)?;
    if train_ds.is_empty() || valid_ds.is_empty() {
        return Err(TrainError::Config("train and valid splits must be non-empty".into()));
    }
    let n_tasks = schema.num_tasks();
    let weights = resolve_per_task(&cfg.weights, n_tasks, "weights")?;
    let sigmas = resolve_per_task(&cfg.sigmas, n_tasks - 1, "sigmas")?;

    let mut model = build_model(cfg.model, &schema, &cfg.hyper, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr, model.params());
    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let best_path = cfg.out_dir.join("best.ckpt");
    let last_path = cfg.out_dir.join("last.ckpt");
    let chash = cfg.config_hash();

    let mut start_epoch = 0u64;
    let mut step = 0u64;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0u64;
    if cfg.resume && last_path.exists() {
        let ck = Checkpoint::load(&last_path)?;
        ck.warn_if_config_differs(chash);
        ck.restore_into(model.params_mut(), &mut opt)?;
        start_epoch = ck.state.epochs_done;
        step = ck.state.step;
        best_metric = ck.state.best_metric;
        log::info!("resuming after epoch {start_epoch} (step {step})");
    }
    if start_epoch >= cfg.epochs {
        return Err(TrainError::Config(format!(
            "checkpoint already covers {start_epoch} epochs; raise epochs past {}",
            cfg.epochs
        )));
    }
    if !(cfg.resume && metrics_path.exists() && start_epoch > 0) {
        std::fs::write(&metrics_path, format!("{}\n", EpochRow::csv_header(n_tasks)))?;
    }

    let mut order_bytes: Vec<u8> = Vec::new();
    let mut rows = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_ds.len());
        for &idx in &order {
            order_bytes.extend_from_slice(&(idx as u64).to_le_bytes());
        }
        let mut sum_total = 0.0;
        let mut sum_main = vec![0.0; n_tasks];
        let mut sum_dep = vec![0.0; n_tasks - 1];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_ds.batch(chunk);
            let tape = crate::numerics::Tape::new();
            let reg = model.params().register(&tape);
            let ctx = ForwardCtx { step, gamma: gamma_at(step) };
            let preds = model.forward(&tape, &reg, &batch, &ctx)?;
            let report = total_loss(&preds, &batch.labels, &weights, &sigmas)?;
            let total = report.total.item();
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let w = chunk.len() as f64;
            sum_total += total * w;
            for (acc, v) in sum_main.iter_mut().zip(report.main_values()) {
                *acc += v * w;
            }
            for (acc, v) in sum_dep.iter_mut().zip(report.dep_values()) {
                *acc += v * w;
            }
            seen += chunk.len();
            tape.backward(&report.total)?;
            let grads: Vec<Option<Vec<f64>>> = (0..reg.len()).map(|i| reg.get(i).grad()).collect();
            opt.update(model.params_mut(), &grads);
            step += 1;
        }
        let denom = seen as f64;
        let gamma_now = gamma_at(step);
        let preds = predict(model.as_ref(), &valid_ds, cfg.batch_size, step, gamma_now)?;
        let valid_auc: Vec<f64> = preds
            .iter()
            .zip(&valid_ds.labels)
            .map(|(p, l)| auc(p, l))
            .collect::<Result<_, _>>()?;
        let vr = violation_rate(&preds)?;
        let row = EpochRow {
            epoch: epoch + 1,
            step,
            train_total: sum_total / denom,
            train_main: sum_main.iter().map(|v| v / denom).collect(),
            train_dep: sum_dep.iter().map(|v| v / denom).collect(),
            valid_auc,
            valid_violation_rate: vr,
        };
        append_line(&metrics_path, &row.csv_line())?;
        let mean_auc = row.valid_auc.iter().sum::<f64>() / n_tasks as f64;
        if mean_auc > best_metric {
            best_metric = mean_auc;
            best_epoch = epoch + 1;
            let state =
                RunState { step, epochs_done: epoch + 1, gamma: gamma_now, best_metric };
            Checkpoint::capture(chash, state, model.params(), &opt).save(&best_path)?;
        }
        let state = RunState { step, epochs_done: epoch + 1, gamma: gamma_now, best_metric };
        Checkpoint::capture(chash, state, model.params(), &opt).save(&last_path)?;
        log::info!(
            "epoch {} step {} train_total {:.6} mean_valid_auc {:.6}",
            epoch + 1,
            step,
            row.train_total,
            mean_auc
        );
        rows.push(row);
    }

    Ok(TrainOutcome {
        rows,
        best_metric,
        best_epoch,
        final_step: step,
        frozen_gamma: gamma_at(step),
        data_order_hash: fnv1a64(&order_bytes),
        metrics_path,
        best_path,
        last_path,
    })
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Test-split (or other split) report from a saved checkpoint.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub auc: Vec<f64>,
    pub violation_rate: f64,
    pub log_loss: Vec<f64>,
    /// Annealing temperature the checkpoint froze.
    pub gamma: f64,
    pub rows: usize,
}

pub fn evaluate(cfg: &TrainConfig, ckpt_path: &Path, split: Split) -> Result<EvalReport, TrainError> {
    let schema = load_schema(cfg)?;
    let ds = load_split(cfg, &schema, split)?;
    if ds.is_empty() {
        return Err(TrainError::Config(format!("{} is empty", split.file_name())));
    }
    let mut model = build_model(cfg.model, &schema, &cfg.hyper, cfg.seed)?;
    let ck = Checkpoint::load(ckpt_path)?;
    ck.warn_if_config_differs(cfg.config_hash());
    ck.restore_params_only(model.params_mut())?;
    let preds = predict(model.as_ref(), &ds, cfg.batch_size, ck.state.step, ck.state.gamma)?;
    let mut aucs = Vec::with_capacity(preds.len());
    let mut lls = Vec::with_capacity(preds.len());
    for (p, l) in preds.iter().zip(&ds.labels) {
        aucs.push(auc(p, l)?);
        lls.push(log_loss(p, l)?);
    }
    Ok(EvalReport {
        auc: aucs,
        violation_rate: violation_rate(&preds)?,
        log_loss: lls,
        gamma: ck.state.gamma,
        rows: ds.len(),
    })
}
