//! Shared model interface, hyperparameters, and MLP building blocks.
//!
//! Every architecture exposes the same surface: build a `ParamSet` at
//! construction, then map a feature batch to one conversion probability
//! vector per task on a caller-provided tape. The trainer is generic over
//! this trait; so are the gradient and structural checks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{DatasetSchema, FeatureBatch};
use crate::numerics::{DiffTensor, NumericsError, Tape};
use crate::params::{glorot_bound, ParamSet, TapeParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-step context the trainer threads into forward passes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    /// Global optimizer step, used by annealing schedules.
    pub step: u64,
    /// Selector temperature for this step.
    pub gamma: f64,
}

pub trait Model {
    fn name(&self) -> &'static str;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn num_tasks(&self) -> usize;
    /// One probability tensor (shape `[batch]`, entries in (0,1)) per task.
    fn forward(
        &self,
        tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        ctx: &ForwardCtx,
    ) -> Result<Vec<DiffTensor>, ModelError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Apem,
    SingleTask,
    SharedBottom,
    Mmoe,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "apem" => Ok(ModelKind::Apem),
            "single_task" => Ok(ModelKind::SingleTask),
            "shared_bottom" => Ok(ModelKind::SharedBottom),
            "mmoe" => Ok(ModelKind::Mmoe),
            other => Err(format!(
                "unknown model {other:?} (apem|single_task|shared_bottom|mmoe)"
            )),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Apem => "apem",
            ModelKind::SingleTask => "single_task",
            ModelKind::SharedBottom => "shared_bottom",
            ModelKind::Mmoe => "mmoe",
        };
        write!(f, "{s}")
    }
}

/// Architecture hyperparameters, with the reference defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyper {
    /// Embedding width per field.
    pub embed_dim: usize,
    /// Attention heads in the encoder and pattern layers.
    pub heads: usize,
    /// Number of inducing points in the encoder.
    pub inducing_points: usize,
    /// Pattern layers per task.
    pub ps_layers: usize,
    /// Hidden widths for the selector MLP (empty = single affine map).
    pub selector_hidden: Vec<usize>,
    /// Hidden width of each task tower.
    pub tower_hidden: usize,
    /// Hidden widths of the per-task MLPs in the single-task baseline.
    pub single_hidden: Vec<usize>,
    /// Hidden widths of the shared trunk in the shared-bottom baseline.
    pub bottom_hidden: Vec<usize>,
    /// Expert count for the mixture baseline.
    pub expert_count: usize,
    /// Expert output width for the mixture baseline.
    pub expert_dim: usize,
    /// Expert hidden width for the mixture baseline.
    pub expert_hidden: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            embed_dim: 18,
            heads: 2,
            inducing_points: 64,
            ps_layers: 4,
            selector_hidden: vec![],
            tower_hidden: 64,
            single_hidden: vec![256, 128, 64],
            bottom_hidden: vec![256, 128, 64],
            expert_count: 4,
            expert_dim: 32,
            expert_hidden: 64,
        }
    }
}

/// Build a model by kind, deterministically from the seed.
pub fn build_model(
    kind: ModelKind,
    schema: &DatasetSchema,
    hyper: &ModelHyper,
    seed: u64,
) -> Result<Box<dyn Model>, ModelError> {
    Ok(match kind {
        ModelKind::Apem => Box::new(crate::pattern_selector::Apem::new(schema, hyper, seed)?),
        ModelKind::SingleTask => Box::new(crate::baselines::SingleTask::new(schema, hyper, seed)?),
        ModelKind::SharedBottom => Box::new(crate::baselines::SharedBottom::new(schema, hyper, seed)?),
        ModelKind::Mmoe => Box::new(crate::baselines::Mmoe::new(schema, hyper, seed)?),
    })
}

/// RNG used for all parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct AffineHandles {
    pub w: usize,
    pub b: usize,
}

pub fn create_affine(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> AffineHandles {
    let w = set.add_uniform(rng, &format!("{prefix}.w"), &[fan_in, fan_out], glorot_bound(fan_in, fan_out));
    let b = set.add_zeros(&format!("{prefix}.b"), &[fan_out]);
    AffineHandles { w, b }
}

pub fn affine(reg: &TapeParams, h: &AffineHandles, x: &DiffTensor) -> DiffTensor {
    x.matmul(reg.get(h.w)).add_row_vec(reg.get(h.b))
}

/// Affine chain with ReLU between layers and a linear last layer.
#[derive(Clone, Debug)]
pub struct MlpHandles {
    pub layers: Vec<AffineHandles>,
}

pub fn create_mlp(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    hidden: &[usize],
    out_dim: usize,
) -> MlpHandles {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut d = in_dim;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(create_affine(set, rng, &format!("{prefix}.l{i}"), d, h));
        d = h;
    }
    layers.push(create_affine(set, rng, &format!("{prefix}.l{}", hidden.len()), d, out_dim));
    MlpHandles { layers }
}

pub fn mlp_forward(reg: &TapeParams, h: &MlpHandles, x: &DiffTensor) -> DiffTensor {
    let mut out = x.clone();
    let last = h.layers.len() - 1;
    for (i, layer) in h.layers.iter().enumerate() {
        out = affine(reg, layer, &out);
        if i != last {
            out = out.relu();
        }
    }
    out
}

/// Final projection of a representation to per-sample probabilities:
/// hidden ReLU layer, scalar output, sigmoid, flattened to `[batch]`.
#[derive(Clone, Debug)]
pub struct TowerHandles {
    mlp: MlpHandles,
}

pub fn create_tower(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
) -> TowerHandles {
    TowerHandles { mlp: create_mlp(set, rng, prefix, in_dim, &[hidden], 1) }
}

pub fn tower_forward(reg: &TapeParams, h: &TowerHandles, x: &DiffTensor) -> DiffTensor {
    let rows = x.shape()[0];
    mlp_forward(reg, &h.mlp, x).sigmoid().reshape(&[rows])
}
