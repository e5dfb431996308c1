//! Inducing-point attention encoder with an annealed soft example selector.
//!
//! The block compresses a sample's field embeddings (`fields x dim`) into a
//! fixed set of `k` inducing-point rows. A selector network scores each
//! inducing point from the flattened embeddings and squashes the score
//! through a piecewise-cubic step `f_D`; its temperature `gamma` anneals from
//! soft (wide ramp) to effectively hard (near-binary) over training. The
//! selected inducing rows attend over the sample's field rows with multi-head
//! dot-product attention, and a residual layer norm produces the encoder
//! output.

use rand_chacha::ChaCha8Rng;

use crate::model::{affine, create_affine, AffineHandles, ModelError};
use crate::numerics::{layer_norm, smooth_step_scalar, DiffTensor};
use crate::params::{ParamSet, TapeParams};

/// Linear annealing floor-clamped at `floor`: `max(init - decay * step, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaSchedule {
    pub init: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule { init: 10.0, decay: 2e-4, floor: 1e-3 }
    }
}

impl GammaSchedule {
    pub fn gamma_at(&self, step: u64) -> f64 {
        (self.init - self.decay * step as f64).max(self.floor)
    }
}

/// Selector temperature at a step under the default schedule.
pub fn gamma_at(step: u64) -> f64 {
    GammaSchedule::default().gamma_at(step)
}

/// Piecewise-cubic step: 0 for `z <= -gamma/2`, 1 for `z >= gamma/2`, and
/// `-(2/gamma^3) z^3 + (3/(2 gamma)) z + 1/2` in between. Continuously
/// differentiable, with maximum slope `3/(2 gamma)` at zero.
pub fn f_d(z: f64, gamma: f64) -> Result<f64, ModelError> {
    if gamma <= 0.0 {
        return Err(ModelError::Config(format!("f_d needs gamma > 0, got {gamma}")));
    }
    Ok(smooth_step_scalar(z, gamma))
}

/// Parameter handles for the selector MLP (affine chain, ReLU between).
#[derive(Clone, Debug)]
pub struct SelectorHandles {
    pub layers: Vec<AffineHandles>,
}

pub fn create_selector(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    hidden: &[usize],
    k: usize,
) -> SelectorHandles {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut d = in_dim;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(create_affine(set, rng, &format!("selector.l{i}"), d, h));
        d = h;
    }
    layers.push(create_affine(set, rng, &format!("selector.l{}", hidden.len()), d, k));
    SelectorHandles { layers }
}

/// Per-sample soft selection mask over the inducing points, in `[0, 1]`:
/// `f_D(selector(flatten(h)))`. Input `h` is `batch x fields x dim`; output
/// is `batch x k`.
pub fn dynamic_selector(
    reg: &TapeParams,
    sel: &SelectorHandles,
    h: &DiffTensor,
    gamma: f64,
) -> Result<DiffTensor, ModelError> {
    if gamma <= 0.0 {
        return Err(ModelError::Config(format!("selector needs gamma > 0, got {gamma}")));
    }
    let shape = h.shape();
    if shape.len() != 3 {
        return Err(ModelError::Shape(format!("selector input must be batch x fields x dim, got {shape:?}")));
    }
    let (batch, fields, dim) = (shape[0], shape[1], shape[2]);
    let mut x = h.reshape(&[batch, fields * dim]);
    let last = sel.layers.len() - 1;
    for (i, layer) in sel.layers.iter().enumerate() {
        x = affine(reg, layer, &x);
        if i != last {
            x = x.relu();
        }
    }
    Ok(x.smooth_step(gamma))
}

/// Handles for the encoder attention: inducing rows, per-head key/value
/// projections, output projection, and the residual layer norm.
#[derive(Clone, Debug)]
pub struct AttnHandles {
    pub inducing: usize,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
    pub ln_gain: usize,
    pub ln_bias: usize,
}

pub fn create_inducing_attention(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    d_f: usize,
    k: usize,
    heads: usize,
) -> Result<AttnHandles, ModelError> {
    if heads == 0 || !d_f.is_multiple_of(heads) {
        return Err(ModelError::Config(format!(
            "embed dim {d_f} must split evenly over {heads} heads"
        )));
    }
    if k == 0 {
        return Err(ModelError::Config("need at least one inducing point".into()));
    }
    let d_head = d_f / heads;
    let inducing = set.add_uniform(rng, "asrg.inducing", &[k, d_f], 0.5);
    let bound = crate::params::glorot_bound(d_f, d_head);
    let wk = (0..heads)
        .map(|j| set.add_uniform(rng, &format!("asrg.wk{j}"), &[d_f, d_head], bound))
        .collect();
    let wv = (0..heads)
        .map(|j| set.add_uniform(rng, &format!("asrg.wv{j}"), &[d_f, d_head], bound))
        .collect();
    let wo = set.add_uniform(rng, "asrg.wo", &[d_f, d_f], crate::params::glorot_bound(d_f, d_f));
    let ln_gain = set.add_ones("asrg.ln_gain", &[d_f]);
    let ln_bias = set.add_zeros("asrg.ln_bias", &[d_f]);
    Ok(AttnHandles { inducing, wk, wv, wo, ln_gain, ln_bias })
}

/// Encoder output plus the pieces the structural checks inspect.
pub struct AsrgOut {
    /// `(batch * k) x d_f`, sample-major blocks of `k` rows.
    pub y: DiffTensor,
    /// The masked queries `(batch * k) x d_f` before attention.
    pub q_hat: DiffTensor,
    /// Attention score block shape per sample and head: `(k, fields)`.
    pub score_shape: (usize, usize),
}

/// Multi-head attention of masked inducing queries over field rows.
///
/// `h_rows` is the embedded batch viewed as `(batch * fields) x d_f`;
/// `z` is the selector mask `batch x k`. Queries are the inducing rows tiled
/// per sample and masked by `z`; each head reads a `d_head`-wide column block
/// of the queries, projects keys/values from `h_rows`, and the concatenated
/// head outputs are projected and layer-normed against the query residual.
pub fn inducing_attention(
    reg: &TapeParams,
    attn: &AttnHandles,
    h_rows: &DiffTensor,
    z: &DiffTensor,
    batch: usize,
    fields: usize,
) -> Result<AsrgOut, ModelError> {
    let hs = h_rows.shape();
    if hs.len() != 2 || hs[0] != batch * fields {
        return Err(ModelError::Shape(format!(
            "field rows must be (batch*fields) x d_f, got {hs:?} for batch {batch} fields {fields}"
        )));
    }
    let d_f = hs[1];
    let ind_shape = reg.get(attn.inducing).shape();
    let k = ind_shape[0];
    if ind_shape[1] != d_f {
        return Err(ModelError::Shape(format!(
            "inducing rows are {ind_shape:?} but field rows have width {d_f}"
        )));
    }
    let zs = z.shape();
    if zs != vec![batch, k] {
        return Err(ModelError::Shape(format!("mask must be batch x k = [{batch}, {k}], got {zs:?}")));
    }
    let heads = attn.wk.len();
    let d_head = d_f / heads;

    let tiled = reg.get(attn.inducing).tile_rows(batch); // (batch*k) x d_f
    let z_flat = z.reshape(&[batch * k]);
    let q_hat = tiled.mul_col_vec(&z_flat);

    let mut head_outs = Vec::with_capacity(heads);
    for j in 0..heads {
        let q_j = q_hat.slice_cols(j * d_head, d_head);
        let k_j = h_rows.matmul(reg.get(attn.wk[j]));
        let v_j = h_rows.matmul(reg.get(attn.wv[j]));
        let scores = q_j.bmm_nt(&k_j, batch).scale(1.0 / (d_head as f64).sqrt());
        debug_assert_eq!(scores.shape(), vec![batch * k, fields]);
        let probs = scores.softmax_rows()?;
        head_outs.push(probs.bmm_nn(&v_j, batch));
    }
    let refs: Vec<&DiffTensor> = head_outs.iter().collect();
    let o = crate::numerics::concat_cols(&refs).matmul(reg.get(attn.wo));
    let y = layer_norm(&q_hat.add(&o), reg.get(attn.ln_gain), reg.get(attn.ln_bias))?;
    Ok(AsrgOut { y, q_hat, score_shape: (k, fields) })
}

/// Per-sample selection rates (mean mask value over the inducing points)
/// with a 20-bin histogram over `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SelectionStats {
    pub rates: Vec<f64>,
    pub histogram: [u64; 20],
    pub mean: f64,
    pub median: f64,
}

pub fn selection_rate_stats(z: &[f64], batch: usize, k: usize) -> Result<SelectionStats, ModelError> {
    if batch == 0 || k == 0 || z.len() != batch * k {
        return Err(ModelError::Shape(format!(
            "mask of {} values does not factor as batch {batch} x k {k}",
            z.len()
        )));
    }
    let rates: Vec<f64> = (0..batch)
        .map(|b| z[b * k..(b + 1) * k].iter().sum::<f64>() / k as f64)
        .collect();
    let mut histogram = [0u64; 20];
    for &r in &rates {
        let bin = ((r * 20.0).floor() as usize).min(19);
        histogram[bin] += 1;
    }
    let mean = rates.iter().sum::<f64>() / batch as f64;
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if batch % 2 == 1 {
        sorted[batch / 2]
    } else {
        0.5 * (sorted[batch / 2 - 1] + sorted[batch / 2])
    };
    Ok(SelectionStats { rates, histogram, mean, median })
}

impl SelectionStats {
    /// `sample_index,rate` rows.
    pub fn rates_csv(&self) -> String {
        let mut out = String::from("sample_index,rate\n");
        for (i, r) in self.rates.iter().enumerate() {
            out.push_str(&format!("{i},{r}\n"));
        }
        out
    }

    /// `bin_lo,bin_hi,count` rows over the 20 equal bins of `[0, 1]`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", i as f64 / 20.0, (i + 1) as f64 / 20.0));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_rng;
    use crate::numerics::Tape;

    #[test]
    fn gamma_schedule_reference_points() {
        assert_eq!(gamma_at(0), 10.0);
        assert!((gamma_at(45_000) - 1.0).abs() < 1e-12);
        assert_eq!(gamma_at(1_000_000), 1e-3);
        // floor engages where the line crosses it
        assert_eq!(gamma_at(49_995), 1e-3);
        assert!(gamma_at(49_994) > 1e-3);
    }

    #[test]
    fn f_d_shape_and_junctions() {
        for &gamma in &[1e-3, 0.5, 1.0, 10.0] {
            assert_eq!(f_d(-gamma, gamma).unwrap(), 0.0);
            assert_eq!(f_d(-gamma / 2.0, gamma).unwrap(), 0.0);
            assert_eq!(f_d(gamma / 2.0, gamma).unwrap(), 1.0);
            assert_eq!(f_d(gamma, gamma).unwrap(), 1.0);
            assert!((f_d(0.0, gamma).unwrap() - 0.5).abs() < 1e-15);
            // value continuity across the junctions
            let d = gamma * 1e-9;
            assert!(f_d(-gamma / 2.0 + d, gamma).unwrap() < 1e-6);
            assert!(f_d(gamma / 2.0 - d, gamma).unwrap() > 1.0 - 1e-6);
        }
        assert!(f_d(0.0, 0.0).is_err());
        assert!(f_d(0.0, -1.0).is_err());
    }

    #[test]
    fn f_d_peak_slope_is_three_over_two_gamma() {
        for &gamma in &[0.5, 1.0, 10.0] {
            let tape = Tape::new();
            let z = tape.param(&[1], vec![0.0]);
            let y = z.smooth_step(gamma).sum_all();
            tape.backward(&y).unwrap();
            let slope = z.grad().unwrap()[0];
            assert!((slope - 1.5 / gamma).abs() < 1e-12, "gamma {gamma}: slope {slope}");
        }
    }

    fn tiny_setup(batch: usize) -> (ParamSet, SelectorHandles, AttnHandles, usize, usize, usize) {
        let (fields, d_f, k, heads) = (3, 4, 2, 2);
        let mut set = ParamSet::new();
        let mut rng = init_rng(5);
        let _emb = set.add_uniform(&mut rng, "emb", &[8, d_f], 0.1);
        let sel = create_selector(&mut set, &mut rng, fields * d_f, &[], k);
        let attn = create_inducing_attention(&mut set, &mut rng, d_f, k, heads).unwrap();
        let _ = batch;
        (set, sel, attn, fields, d_f, k)
    }

    #[test]
    fn selector_outputs_lie_in_unit_interval() {
        let batch = 5;
        let (set, sel, _attn, fields, d_f, k) = tiny_setup(batch);
        let tape = Tape::new();
        let reg = set.register(&tape);
        let h = tape.input(&[batch, fields, d_f], (0..batch * fields * d_f).map(|i| (i as f64 * 0.37).sin()).collect());
        let z = dynamic_selector(&reg, &sel, &h, 1.0).unwrap();
        assert_eq!(z.shape(), vec![batch, k]);
        assert!(z.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(dynamic_selector(&reg, &sel, &h, 0.0).is_err());
    }

    #[test]
    fn attention_shapes_and_score_blocks() {
        let batch = 4;
        let (set, sel, attn, fields, d_f, k) = tiny_setup(batch);
        let tape = Tape::new();
        let reg = set.register(&tape);
        let h = tape.input(&[batch, fields, d_f], (0..batch * fields * d_f).map(|i| (i as f64 * 0.11).cos()).collect());
        let z = dynamic_selector(&reg, &sel, &h, 2.0).unwrap();
        let h_rows = h.reshape(&[batch * fields, d_f]);
        let out = inducing_attention(&reg, &attn, &h_rows, &z, batch, fields).unwrap();
        assert_eq!(out.score_shape, (k, fields));
        assert_eq!(out.y.shape(), vec![batch * k, d_f]);
        assert_eq!(out.q_hat.shape(), vec![batch * k, d_f]);
        assert!(out.y.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_mask_zeroes_queries() {
        let batch = 2;
        let (set, _sel, attn, fields, d_f, k) = tiny_setup(batch);
        let tape = Tape::new();
        let reg = set.register(&tape);
        let h = tape.input(&[batch, fields, d_f], vec![0.3; batch * fields * d_f]);
        let z = tape.input(&[batch, k], vec![0.0; batch * k]);
        let h_rows = h.reshape(&[batch * fields, d_f]);
        let out = inducing_attention(&reg, &attn, &h_rows, &z, batch, fields).unwrap();
        assert!(out.q_hat.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn selection_stats_known_values() {
        // batch 3, k 2: rates 0.5, 1.0, 0.0
        let z = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let stats = selection_rate_stats(&z, 3, 2).unwrap();
        assert_eq!(stats.rates, vec![0.5, 1.0, 0.0]);
        assert!((stats.mean - 0.5).abs() < 1e-15);
        assert_eq!(stats.median, 0.5);
        assert_eq!(stats.histogram.iter().sum::<u64>(), 3);
        assert_eq!(stats.histogram[0], 1); // rate 0.0
        assert_eq!(stats.histogram[10], 1); // rate 0.5
        assert_eq!(stats.histogram[19], 1); // rate 1.0 clamps into last bin
        assert!(stats.rates_csv().starts_with("sample_index,rate\n0,0.5\n"));
        assert!(selection_rate_stats(&z, 2, 2).is_err());
    }
}
