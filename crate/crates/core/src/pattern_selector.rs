//! Per-task pattern extraction over the encoder output, and the full model
//! that chains embedding, encoder, pattern stacks, and task towers.
//!
//! Each task owns a stack of pattern layers. A layer holds a learned query
//! vector that attends over the sample's encoded inducing rows with
//! multi-head attention, producing one pattern vector per sample; the stack
//! accumulates layers through residual layer norms:
//! `T^1 = LN(F^1)`, `T^k = LN(T^{k-1} + F^k)`. A small tower turns the final
//! pattern into the task's conversion probability.

use rand_chacha::ChaCha8Rng;

use crate::asrg::{
    create_inducing_attention, create_selector, dynamic_selector, inducing_attention,
    AttnHandles, GammaSchedule, SelectorHandles,
};
use crate::features::{create_embeddings, embed_lookup, DatasetSchema, FeatureBatch};
use crate::model::{
    create_tower, init_rng, tower_forward, ForwardCtx, Model, ModelError, ModelHyper,
    TowerHandles,
};
use crate::numerics::{layer_norm, DiffTensor, Tape};
use crate::params::{glorot_bound, ParamSet, TapeParams};

/// One pattern layer: query vector, per-head key/value projections, output
/// projection, and the residual layer norm of the stack step.
#[derive(Clone, Debug)]
pub struct PsLayerHandles {
    pub alpha: usize,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
    pub ln_gain: usize,
    pub ln_bias: usize,
}

pub fn create_ps_layer(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_f: usize,
    heads: usize,
) -> Result<PsLayerHandles, ModelError> {
    if heads == 0 || !d_f.is_multiple_of(heads) {
        return Err(ModelError::Config(format!(
            "pattern width {d_f} must split evenly over {heads} heads"
        )));
    }
    let d_head = d_f / heads;
    let bound = glorot_bound(d_f, d_head);
    let alpha = set.add_uniform(rng, &format!("{prefix}.alpha"), &[1, d_f], 0.5);
    let wk = (0..heads)
        .map(|j| set.add_uniform(rng, &format!("{prefix}.wk{j}"), &[d_f, d_head], bound))
        .collect();
    let wv = (0..heads)
        .map(|j| set.add_uniform(rng, &format!("{prefix}.wv{j}"), &[d_f, d_head], bound))
        .collect();
    let wo = set.add_uniform(rng, &format!("{prefix}.wo"), &[d_f, d_f], glorot_bound(d_f, d_f));
    let ln_gain = set.add_ones(&format!("{prefix}.ln_gain"), &[d_f]);
    let ln_bias = set.add_zeros(&format!("{prefix}.ln_bias"), &[d_f]);
    Ok(PsLayerHandles { alpha, wk, wv, wo, ln_gain, ln_bias })
}

/// One layer's pattern vector per sample: the layer's query attends over the
/// sample's `k` encoded rows. `y_rows` is `(batch * k) x d_f`; the result is
/// `batch x d_f` (before the stack's layer norm).
pub fn pattern_select(
    reg: &TapeParams,
    layer: &PsLayerHandles,
    y_rows: &DiffTensor,
    batch: usize,
) -> Result<DiffTensor, ModelError> {
    let ys = y_rows.shape();
    if ys.len() != 2 || !ys[0].is_multiple_of(batch) {
        return Err(ModelError::Shape(format!(
            "encoded rows {ys:?} do not split into batch {batch} blocks"
        )));
    }
    let d_f = ys[1];
    let heads = layer.wk.len();
    let d_head = d_f / heads;

    let query = reg.get(layer.alpha).tile_rows(batch); // batch x d_f, one row per sample
    let mut head_outs = Vec::with_capacity(heads);
    for j in 0..heads {
        let q_j = query.slice_cols(j * d_head, d_head);
        let k_j = y_rows.matmul(reg.get(layer.wk[j]));
        let v_j = y_rows.matmul(reg.get(layer.wv[j]));
        let scores = q_j.bmm_nt(&k_j, batch).scale(1.0 / (d_head as f64).sqrt());
        let probs = scores.softmax_rows()?;
        head_outs.push(probs.bmm_nn(&v_j, batch));
    }
    let refs: Vec<&DiffTensor> = head_outs.iter().collect();
    Ok(crate::numerics::concat_cols(&refs).matmul(reg.get(layer.wo)))
}

/// Residual stack of pattern layers for one task: `T^1 = LN(F^1)`,
/// `T^k = LN(T^{k-1} + F^k)`, all attending over the same encoded rows.
pub fn ps_stack(
    reg: &TapeParams,
    layers: &[PsLayerHandles],
    y_rows: &DiffTensor,
    batch: usize,
) -> Result<DiffTensor, ModelError> {
    if layers.is_empty() {
        return Err(ModelError::Config("pattern stack needs at least one layer".into()));
    }
    let mut t: Option<DiffTensor> = None;
    for layer in layers {
        let f = pattern_select(reg, layer, y_rows, batch)?;
        let pre = match &t {
            None => f,
            Some(prev) => prev.add(&f),
        };
        t = Some(layer_norm(&pre, reg.get(layer.ln_gain), reg.get(layer.ln_bias))?);
    }
    Ok(t.unwrap())
}

/// Full model: field embeddings, annealed-selector inducing attention, one
/// pattern stack and tower per task.
pub struct Apem {
    params: ParamSet,
    schema_fields: usize,
    n_tasks: usize,
    d_f: usize,
    k: usize,
    embeddings: Vec<usize>,
    selector: SelectorHandles,
    attn: AttnHandles,
    /// `[task][layer]`
    ps: Vec<Vec<PsLayerHandles>>,
    towers: Vec<TowerHandles>,
    pub gamma: GammaSchedule,
}

/// Intermediates the structural checks and the selector-inspection command
/// look at.
pub struct ApemTrace {
    /// Selector mask `batch x k`.
    pub z: DiffTensor,
    /// Encoder output `(batch * k) x d_f`.
    pub y: DiffTensor,
    /// Per-sample, per-head attention score block shape `(k, fields)`.
    pub score_shape: (usize, usize),
    /// Forward FLOPs recorded while building embedding + encoder.
    pub encoder_flops: u64,
}

impl Apem {
    pub fn new(schema: &DatasetSchema, hyper: &ModelHyper, seed: u64) -> Result<Self, ModelError> {
        if hyper.ps_layers == 0 {
            return Err(ModelError::Config("ps_layers must be at least 1".into()));
        }
        let fields = schema.num_fields();
        let n_tasks = schema.num_tasks();
        let d_f = hyper.embed_dim;
        let mut params = ParamSet::new();
        let mut rng = init_rng(seed);
        let embeddings = create_embeddings(&mut params, &mut rng, schema, d_f);
        let selector = create_selector(
            &mut params,
            &mut rng,
            fields * d_f,
            &hyper.selector_hidden,
            hyper.inducing_points,
        );
        let attn = create_inducing_attention(&mut params, &mut rng, d_f, hyper.inducing_points, hyper.heads)?;
        let mut ps = Vec::with_capacity(n_tasks);
        let mut towers = Vec::with_capacity(n_tasks);
        for t in 0..n_tasks {
            let mut layers = Vec::with_capacity(hyper.ps_layers);
            for l in 0..hyper.ps_layers {
                layers.push(create_ps_layer(&mut params, &mut rng, &format!("ps.t{t}.l{l}"), d_f, hyper.heads)?);
            }
            ps.push(layers);
            towers.push(create_tower(&mut params, &mut rng, &format!("tower.t{t}"), d_f, hyper.tower_hidden));
        }
        Ok(Apem {
            params,
            schema_fields: fields,
            n_tasks,
            d_f,
            k: hyper.inducing_points,
            embeddings,
            selector,
            attn,
            ps,
            towers,
            gamma: GammaSchedule::default(),
        })
    }

    /// The embedding + encoder part alone. Identical inputs always produce
    /// bit-identical output here regardless of what is stacked on top, since
    /// the downstream layers never feed back into this path.
    pub fn encode(
        &self,
        tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        gamma: f64,
    ) -> Result<(crate::asrg::AsrgOut, DiffTensor, u64), ModelError> {
        if batch.fields != self.schema_fields {
            return Err(ModelError::Shape(format!(
                "batch has {} fields, model expects {}",
                batch.fields, self.schema_fields
            )));
        }
        let flops_before = tape.flops();
        let h = embed_lookup(reg, &self.embeddings, batch, self.d_f);
        let z = dynamic_selector(reg, &self.selector, &h, gamma)?;
        let h_rows = h.reshape(&[batch.batch * batch.fields, self.d_f]);
        let out = inducing_attention(reg, &self.attn, &h_rows, &z, batch.batch, batch.fields)?;
        let encoder_flops = tape.flops() - flops_before;
        Ok((out, z, encoder_flops))
    }

    pub fn forward_traced(
        &self,
        tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        ctx: &ForwardCtx,
    ) -> Result<(Vec<DiffTensor>, ApemTrace), ModelError> {
        let (encoded, z, encoder_flops) = self.encode(tape, reg, batch, ctx.gamma)?;
        let mut preds = Vec::with_capacity(self.n_tasks);
        for t in 0..self.n_tasks {
            let pattern = ps_stack(reg, &self.ps[t], &encoded.y, batch.batch)?;
            preds.push(tower_forward(reg, &self.towers[t], &pattern));
        }
        let trace = ApemTrace {
            z,
            y: encoded.y,
            score_shape: encoded.score_shape,
            encoder_flops,
        };
        Ok((preds, trace))
    }

    pub fn num_inducing(&self) -> usize {
        self.k
    }

    /// Parameter indices of one task's pattern stack and tower, for
    /// isolation checks.
    pub fn task_param_indices(&self, task: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.ps[task] {
            out.push(layer.alpha);
            out.extend_from_slice(&layer.wk);
            out.extend_from_slice(&layer.wv);
            out.push(layer.wo);
            out.push(layer.ln_gain);
            out.push(layer.ln_bias);
        }
        out
    }

    pub fn alpha_index(&self, task: usize, layer: usize) -> usize {
        self.ps[task][layer].alpha
    }
}

impl Model for Apem {
    fn name(&self) -> &'static str {
        "apem"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_tasks(&self) -> usize {
        self.n_tasks
    }

    fn forward(
        &self,
        tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        ctx: &ForwardCtx,
    ) -> Result<Vec<DiffTensor>, ModelError> {
        Ok(self.forward_traced(tape, reg, batch, ctx)?.0)
    }
}
