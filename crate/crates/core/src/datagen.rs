//! Synthetic funnel dataset generator with known ground truth.
//!
//! Labels follow the funnel by construction: task 1 converts with probability
//! `sigmoid(logit_1)`, and each later task converts only among the previous
//! task's converters, with conditional probability `sigmoid(logit_i)`. Logits
//! are linear in per-(field, value) weights drawn once per seed, so the
//! entire-space conversion probabilities `q_i = prod_{j<=i} p_j` are known
//! exactly and land in a truth file next to the data. That makes the best
//! achievable ranking quality (the truth's own AUC) measurable, which is what
//! end-to-end training is judged against.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::features::{funnel_check, DatasetSchema, FeatureError, FeatureKind, FeatureSpec};
use crate::trainer::metrics::{auc, MetricsError};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Generator configuration. Field 0 is numeric (values `e^b - 1` so the log
/// bucketizer recovers `b` exactly); the rest are categorical strings.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub rows: usize,
    pub fields: usize,
    pub tasks: usize,
    /// Distinct raw values per field.
    pub values_per_field: usize,
    /// Hash vocabulary for categorical fields.
    pub vocab: usize,
    /// Scale of the per-(field, value) logit weights.
    pub strength: f64,
    /// Per-task conditional conversion logit offset.
    pub biases: Vec<f64>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rows: 50_000,
            fields: 6,
            tasks: 2,
            values_per_field: 24,
            vocab: 512,
            strength: 0.8,
            biases: vec![-0.4, -0.2],
            seed: 0,
        }
    }
}

/// Output file locations of one generation run.
#[derive(Clone, Debug)]
pub struct GenPaths {
    pub schema: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub truth_train: PathBuf,
    pub truth_valid: PathBuf,
    pub truth_test: PathBuf,
    pub weights: PathBuf,
}

impl GenPaths {
    pub fn in_dir(dir: &Path) -> Self {
        GenPaths {
            schema: dir.join("schema.txt"),
            train: dir.join("train.csv"),
            valid: dir.join("valid.csv"),
            test: dir.join("test.csv"),
            truth_train: dir.join("truth_train.csv"),
            truth_valid: dir.join("truth_valid.csv"),
            truth_test: dir.join("truth_test.csv"),
            weights: dir.join("weights.csv"),
        }
    }
}

/// The schema a config generates under.
pub fn schema_for(cfg: &GenConfig) -> Result<DatasetSchema, DatagenError> {
    validate(cfg)?;
    let mut features = Vec::with_capacity(cfg.fields);
    for f in 0..cfg.fields {
        let (kind, vocab) = if f == 0 {
            (FeatureKind::Numeric, cfg.values_per_field)
        } else {
            (FeatureKind::Categorical, cfg.vocab)
        };
        features.push(FeatureSpec { name: format!("f{f}"), kind, vocab });
    }
    let labels = (1..=cfg.tasks).map(|t| format!("t{t}")).collect();
    Ok(DatasetSchema::new(features, labels)?)
}

fn validate(cfg: &GenConfig) -> Result<(), DatagenError> {
    if cfg.fields == 0 {
        return Err(DatagenError::Config("need at least one field".into()));
    }
    if cfg.tasks < 2 {
        return Err(DatagenError::Config("need at least two tasks".into()));
    }
    if cfg.rows < 10 {
        return Err(DatagenError::Config("need at least 10 rows".into()));
    }
    if cfg.values_per_field < 2 {
        return Err(DatagenError::Config("need at least two values per field".into()));
    }
    if cfg.biases.len() != cfg.tasks {
        return Err(DatagenError::Config(format!(
            "need one bias per task: {} biases for {} tasks",
            cfg.biases.len(),
            cfg.tasks
        )));
    }
    if !cfg.strength.is_finite() || cfg.strength < 0.0 {
        return Err(DatagenError::Config("strength must be finite and non-negative".into()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Generate one dataset: train/valid/test CSVs split 8:1:1 in generation
/// order, per-split truth files (`sample_index,p_1..p_N`, entire-space
/// probabilities), the generator weights, and the schema. Byte-identical for
/// identical configs.
pub fn generate(cfg: &GenConfig, out_dir: &Path) -> Result<GenPaths, DatagenError> {
    let schema = schema_for(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let paths = GenPaths::in_dir(out_dir);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // weights first, so row sampling is independent of how they are stored
    let normal = StandardNormal;
    let mut weights = vec![vec![vec![0.0f64; cfg.values_per_field]; cfg.fields]; cfg.tasks];
    for task in weights.iter_mut() {
        for field in task.iter_mut() {
            for w in field.iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
    }

    let header: String = {
        let mut cols: Vec<String> = (0..cfg.fields).map(|f| format!("f{f}")).collect();
        cols.extend((1..=cfg.tasks).map(|t| format!("t{t}")));
        cols.join(",")
    };
    let truth_header: String = {
        let mut cols = vec!["sample_index".to_string()];
        cols.extend((1..=cfg.tasks).map(|t| format!("p_{t}")));
        cols.join(",")
    };

    let n_train = cfg.rows * 8 / 10;
    let n_valid = cfg.rows / 10;
    let splits = [
        (n_train, &paths.train, &paths.truth_train, "train"),
        (n_valid, &paths.valid, &paths.truth_valid, "valid"),
        (cfg.rows - n_train - n_valid, &paths.test, &paths.truth_test, "test"),
    ];

    for (count, data_path, truth_path, split_name) in splits {
        let mut data = String::with_capacity(count * 32);
        let mut truth = String::with_capacity(count * 24);
        data.push_str(&header);
        data.push('\n');
        truth.push_str(&truth_header);
        truth.push('\n');
        let mut positives = vec![0usize; cfg.tasks];
        for i in 0..count {
            let vals: Vec<usize> = (0..cfg.fields).map(|_| rng.gen_range(0..cfg.values_per_field)).collect();
            let mut labels = Vec::with_capacity(cfg.tasks);
            let mut qs = Vec::with_capacity(cfg.tasks);
            let mut q = 1.0f64;
            let mut still_in = true;
            for t in 0..cfg.tasks {
                let logit = cfg.biases[t]
                    + cfg.strength * vals.iter().enumerate().map(|(f, &v)| weights[t][f][v]).sum::<f64>();
                let p_cond = sigmoid(logit);
                q *= p_cond;
                qs.push(q);
                let converted = still_in && rng.gen::<f64>() < p_cond;
                still_in = converted;
                labels.push(u8::from(converted));
                positives[t] += usize::from(converted);
            }
            for (f, &v) in vals.iter().enumerate() {
                if f > 0 {
                    data.push(',');
                }
                if f == 0 {
                    data.push_str(&format!("{}", (v as f64).exp() - 1.0));
                } else {
                    data.push_str(&format!("v{v}"));
                }
            }
            for l in &labels {
                data.push_str(&format!(",{l}"));
            }
            data.push('\n');
            truth.push_str(&format!("{i}"));
            for qv in &qs {
                truth.push_str(&format!(",{qv}"));
            }
            truth.push('\n');
        }
        for (t, &pos) in positives.iter().enumerate() {
            if pos == 0 || pos == count {
                return Err(DatagenError::Degenerate(format!(
                    "split {split_name}: task {} has {pos} positives out of {count} rows",
                    t + 1
                )));
            }
        }
        std::fs::write(data_path, data)?;
        std::fs::write(truth_path, truth)?;
    }

    let mut wout = String::from("task,field,value,weight\n");
    for (t, task) in weights.iter().enumerate() {
        wout.push_str(&format!("{},_bias,0,{}\n", t + 1, cfg.biases[t]));
        for (f, field) in task.iter().enumerate() {
            for (v, w) in field.iter().enumerate() {
                wout.push_str(&format!("{},f{f},{v},{w}\n", t + 1));
            }
        }
    }
    std::fs::write(&paths.weights, wout)?;
    schema.to_file(&paths.schema)?;
    Ok(paths)
}

/// Raw 0/1 labels straight off a data CSV (no funnel policing), one vector
/// per task in schema order.
pub fn read_labels(data: &Path, schema: &DatasetSchema) -> Result<Vec<Vec<f64>>, DatagenError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(data)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<usize> = schema
        .labels
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatagenError::Config(format!("label column {name} missing")))
        })
        .collect::<Result<_, _>>()?;
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); cols.len()];
    for record in reader.records() {
        let record = record?;
        for (t, &c) in cols.iter().enumerate() {
            let v = match &record[c] {
                "0" => 0.0,
                "1" => 1.0,
                other => return Err(DatagenError::Config(format!("label {other:?} is not 0/1"))),
            };
            labels[t].push(v);
        }
    }
    Ok(labels)
}

/// Funnel violations in a data file, counted without dropping anything.
pub fn funnel_check_file(data: &Path, schema: &DatasetSchema) -> Result<usize, DatagenError> {
    Ok(funnel_check(&read_labels(data, schema)?))
}

/// Per-task truth columns from a truth file.
pub fn read_truth(path: &Path, tasks: usize) -> Result<Vec<Vec<f64>>, DatagenError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); tasks];
    for record in reader.records() {
        let record = record?;
        if record.len() != tasks + 1 {
            return Err(DatagenError::Config(format!(
                "truth row has {} columns, expected {}",
                record.len(),
                tasks + 1
            )));
        }
        for t in 0..tasks {
            let v: f64 = record[t + 1]
                .parse()
                .map_err(|e| DatagenError::Config(format!("bad truth value: {e}")))?;
            out[t].push(v);
        }
    }
    Ok(out)
}

/// AUC of the generator's own entire-space probabilities against the sampled
/// labels — the ranking quality of the true model, i.e. the ceiling any
/// learned model is measured against. `task` is 0-based.
pub fn bayes_optimal_auc(
    truth: &Path,
    data: &Path,
    schema: &DatasetSchema,
    task: usize,
) -> Result<f64, DatagenError> {
    let labels = read_labels(data, schema)?;
    let probs = read_truth(truth, schema.num_tasks())?;
    if task >= labels.len() {
        return Err(DatagenError::Config(format!("task {task} out of range")));
    }
    if labels[task].len() != probs[task].len() {
        return Err(DatagenError::Config(format!(
            "truth has {} rows, data has {}",
            probs[task].len(),
            labels[task].len()
        )));
    }
    Ok(auc(&probs[task], &labels[task])?)
}
