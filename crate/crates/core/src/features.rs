//! Feature schema, ingestion, and embedding lookup.
//!
//! Datasets are CSVs with one column per feature and one 0/1 column per task
//! label, ordered down the funnel (a later task can only convert if the
//! previous one did). Categorical features hash into a fixed vocabulary with
//! FNV-1a; numeric features bucketize on a log scale. Each field owns its own
//! embedding table, and a lookup concatenates per-field rows into the
//! `batch x fields x dim` input the encoders consume.

use std::fmt;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::DiffTensor;
use crate::params::{ParamSet, TapeParams};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema: {0}")]
    Schema(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: funnel violation (a later task converted without the earlier one)")]
    FunnelViolation { line: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::Categorical => write!(f, "categorical"),
            FeatureKind::Numeric => write!(f, "numeric"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Number of distinct buckets (embedding rows) for this field.
    pub vocab: usize,
}

/// Ordered feature fields plus ordered funnel-task label columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSchema {
    pub features: Vec<FeatureSpec>,
    pub labels: Vec<String>,
}

impl DatasetSchema {
    pub fn new(features: Vec<FeatureSpec>, labels: Vec<String>) -> Result<Self, FeatureError> {
        let schema = DatasetSchema { features, labels };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<(), FeatureError> {
        if self.features.is_empty() {
            return Err(FeatureError::Schema("no feature fields".into()));
        }
        if self.labels.len() < 2 {
            return Err(FeatureError::Schema(format!(
                "need at least two funnel tasks, got {}",
                self.labels.len()
            )));
        }
        for f in &self.features {
            if f.vocab == 0 {
                return Err(FeatureError::Schema(format!("field {} has empty vocab", f.name)));
            }
        }
        let mut names: Vec<&str> = self
            .features
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.labels.iter().map(|l| l.as_str()))
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(FeatureError::Schema("duplicate column name".into()));
        }
        Ok(())
    }

    pub fn num_fields(&self) -> usize {
        self.features.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }

    /// Parse the `key=value` schema format: one `name=kind,vocab` line per
    /// field plus a single `labels=t1,t2,...` line. Order of field lines is
    /// the field order; `#` starts a comment.
    pub fn from_str_format(text: &str) -> Result<Self, FeatureError> {
        let mut features = Vec::new();
        let mut labels: Option<Vec<String>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| FeatureError::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "labels" {
                if labels.is_some() {
                    return Err(FeatureError::Parse {
                        line: lineno + 1,
                        msg: "labels listed twice".into(),
                    });
                }
                labels = Some(value.split(',').map(|s| s.trim().to_string()).collect());
            } else {
                let (kind, vocab) = value.split_once(',').ok_or_else(|| FeatureError::Parse {
                    line: lineno + 1,
                    msg: format!("field {key} needs kind,vocab"),
                })?;
                let kind = match kind.trim() {
                    "categorical" => FeatureKind::Categorical,
                    "numeric" => FeatureKind::Numeric,
                    other => {
                        return Err(FeatureError::Parse {
                            line: lineno + 1,
                            msg: format!("unknown feature kind {other:?}"),
                        })
                    }
                };
                let vocab = vocab.trim().parse::<usize>().map_err(|e| FeatureError::Parse {
                    line: lineno + 1,
                    msg: format!("bad vocab for {key}: {e}"),
                })?;
                features.push(FeatureSpec { name: key.to_string(), kind, vocab });
            }
        }
        let labels = labels.ok_or_else(|| FeatureError::Schema("missing labels line".into()))?;
        DatasetSchema::new(features, labels)
    }

    pub fn from_file(path: &Path) -> Result<Self, FeatureError> {
        Self::from_str_format(&std::fs::read_to_string(path)?)
    }

    pub fn to_str_format(&self) -> String {
        let mut out = String::new();
        for f in &self.features {
            out.push_str(&format!("{}={},{}\n", f.name, f.kind, f.vocab));
        }
        out.push_str(&format!("labels={}\n", self.labels.join(",")));
        out
    }

    pub fn to_file(&self, path: &Path) -> Result<(), FeatureError> {
        std::fs::write(path, self.to_str_format())?;
        Ok(())
    }
}

/// 64-bit FNV-1a. Stable across platforms and releases; categorical buckets
/// and config hashes both ride on it.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket index for a categorical value: FNV-1a of the raw string, mod vocab.
pub fn hash_bucket(value: &str, vocab: usize) -> u32 {
    (fnv1a64(value.as_bytes()) % vocab as u64) as u32
}

/// Log-scale bucket for a non-negative numeric value: `round(ln(1 + x))`,
/// clamped into `[0, vocab)`. Rejects negative and non-finite input.
pub fn log_round_bucketize(x: f64, vocab: usize) -> Result<u32, FeatureError> {
    if !x.is_finite() || x < 0.0 {
        return Err(FeatureError::Schema(format!(
            "numeric feature must be finite and non-negative, got {x}"
        )));
    }
    let bucket = (1.0 + x).ln().round() as u64;
    Ok(bucket.min(vocab as u64 - 1) as u32)
}

/// What to do with rows that violate the funnel ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FunnelPolicy {
    /// Any violating row aborts the load.
    #[default]
    RejectFile,
    /// Violating rows are dropped and counted.
    DropRow,
}

impl std::str::FromStr for FunnelPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reject_file" => Ok(FunnelPolicy::RejectFile),
            "drop_row" => Ok(FunnelPolicy::DropRow),
            other => Err(format!("unknown funnel policy {other:?} (reject_file|drop_row)")),
        }
    }
}

impl std::fmt::Display for FunnelPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FunnelPolicy::RejectFile => "reject_file",
            FunnelPolicy::DropRow => "drop_row",
        })
    }
}

/// Fully ingested dataset: bucket indices row-major `[rows x fields]` and one
/// 0/1 label vector per task.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub indices: Vec<u32>,
    pub labels: Vec<Vec<f64>>,
    /// Rows removed by [`FunnelPolicy::DropRow`].
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assemble a batch from row ids, in the given order.
    pub fn batch(&self, rows: &[usize]) -> FeatureBatch {
        let fields = self.schema.num_fields();
        let mut indices = Vec::with_capacity(rows.len() * fields);
        for &r in rows {
            indices.extend_from_slice(&self.indices[r * fields..(r + 1) * fields]);
        }
        let labels = self
            .labels
            .iter()
            .map(|task| rows.iter().map(|&r| task[r]).collect())
            .collect();
        FeatureBatch { indices, labels, batch: rows.len(), fields }
    }
}

/// One batch of bucket indices (`batch x fields`, row-major) plus per-task labels.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub indices: Vec<u32>,
    pub labels: Vec<Vec<f64>>,
    pub batch: usize,
    pub fields: usize,
}

impl FeatureBatch {
    /// Bucket indices of one field across the batch.
    pub fn field_indices(&self, field: usize) -> Vec<u32> {
        (0..self.batch)
            .map(|b| self.indices[b * self.fields + field])
            .collect()
    }
}

/// Count of (row, adjacent-task-pair) funnel violations: `t_i = 1` while
/// `t_{i-1} = 0`.
pub fn funnel_check(labels: &[Vec<f64>]) -> usize {
    if labels.len() < 2 {
        return 0;
    }
    let mut violations = 0;
    for pair in labels.windows(2) {
        for (prev, cur) in pair[0].iter().zip(&pair[1]) {
            if *cur == 1.0 && *prev == 0.0 {
                violations += 1;
            }
        }
    }
    violations
}

/// Load a dataset CSV against a schema. The header must list the schema's
/// feature columns followed by its label columns, in order. Malformed values
/// are always errors; funnel-violating rows follow `policy`.
pub fn load_csv(path: &Path, schema: &DatasetSchema, policy: FunnelPolicy) -> Result<Dataset, FeatureError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let expected: Vec<&str> = schema
        .features
        .iter()
        .map(|f| f.name.as_str())
        .chain(schema.labels.iter().map(|l| l.as_str()))
        .collect();
    {
        let headers = reader.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(FeatureError::Schema(format!(
                "header mismatch: expected {expected:?}, got {got:?}"
            )));
        }
    }

    let fields = schema.num_fields();
    let tasks = schema.num_tasks();
    let mut indices: Vec<u32> = Vec::new();
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); tasks];
    let mut dropped = 0usize;

    for (recno, record) in reader.records().enumerate() {
        let line = recno + 2; // header is line 1
        let record = record?;
        if record.len() != fields + tasks {
            return Err(FeatureError::Parse {
                line,
                msg: format!("expected {} columns, got {}", fields + tasks, record.len()),
            });
        }
        let mut row_idx = Vec::with_capacity(fields);
        for (f, spec) in schema.features.iter().enumerate() {
            let raw = &record[f];
            let bucket = match spec.kind {
                FeatureKind::Categorical => hash_bucket(raw, spec.vocab),
                FeatureKind::Numeric => {
                    let x: f64 = raw.parse().map_err(|e| FeatureError::Parse {
                        line,
                        msg: format!("field {}: {e}", spec.name),
                    })?;
                    log_round_bucketize(x, spec.vocab).map_err(|_| FeatureError::Parse {
                        line,
                        msg: format!("field {}: negative or non-finite value {raw}", spec.name),
                    })?
                }
            };
            row_idx.push(bucket);
        }
        let mut row_labels = Vec::with_capacity(tasks);
        for (t, name) in schema.labels.iter().enumerate() {
            let raw = &record[fields + t];
            let v = match raw {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(FeatureError::Parse {
                        line,
                        msg: format!("label {name}: expected 0 or 1, got {other:?}"),
                    })
                }
            };
            row_labels.push(v);
        }
        let violates = row_labels.windows(2).any(|w| w[1] == 1.0 && w[0] == 0.0);
        if violates {
            match policy {
                FunnelPolicy::RejectFile => return Err(FeatureError::FunnelViolation { line }),
                FunnelPolicy::DropRow => {
                    dropped += 1;
                    continue;
                }
            }
        }
        indices.extend_from_slice(&row_idx);
        for (t, v) in row_labels.into_iter().enumerate() {
            labels[t].push(v);
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} funnel-violating rows from {}", path.display());
    }
    Ok(Dataset { schema: schema.clone(), indices, labels, dropped_rows: dropped })
}

/// Create one embedding table per field, named `embed.<field>`, shaped
/// `vocab x dim`, uniform-initialized on `[-0.05, 0.05]`.
pub fn create_embeddings(set: &mut ParamSet, rng: &mut ChaCha8Rng, schema: &DatasetSchema, dim: usize) -> Vec<usize> {
    create_embeddings_named(set, rng, schema, dim, "embed")
}

/// Same as [`create_embeddings`] with a caller-chosen name prefix, for models
/// that keep several independent embedding sets.
pub fn create_embeddings_named(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    schema: &DatasetSchema,
    dim: usize,
    prefix: &str,
) -> Vec<usize> {
    schema
        .features
        .iter()
        .map(|f| set.add_uniform(rng, &format!("{prefix}.{}", f.name), &[f.vocab, dim], 0.05))
        .collect()
}

/// Look up the batch's embedding rows: result is logically
/// `batch x fields x dim` (stored row-major, so row `b*fields + f` of the
/// `[batch*fields, dim]` view is field `f` of sample `b`).
pub fn embed_lookup(reg: &TapeParams, tables: &[usize], batch: &FeatureBatch, dim: usize) -> DiffTensor {
    assert_eq!(tables.len(), batch.fields, "one embedding table per field");
    let per_field: Vec<DiffTensor> = tables
        .iter()
        .enumerate()
        .map(|(f, &t)| reg.get(t).gather_rows(&batch.field_indices(f)))
        .collect();
    let refs: Vec<&DiffTensor> = per_field.iter().collect();
    // rows: samples; cols: fields*dim blocked by field — identical layout to
    // batch x fields x dim flattened row-major.
    crate::numerics::concat_cols(&refs).reshape(&[batch.batch, batch.fields, dim])
}
