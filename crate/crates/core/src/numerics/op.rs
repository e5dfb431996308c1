//! Primitive op records and their reverse-mode rules.
//!
//! Every op stores the ids of its inputs plus whatever metadata the backward
//! pass needs. Backward reads input *values* immutably and accumulates into
//! input *gradients*; gradients of interior nodes are dropped as soon as the
//! node has been processed so the live set stays small.

use std::rc::Rc;

use super::kernels;
use super::Node;

/// Clamp bound shared by the mean-BCE op: predictions are pinned into
/// `[BCE_EPS, 1 - BCE_EPS]` before the logs are taken.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    SmoothStep { x: usize, gamma: f64 },
    /// `out[r, c] = x[r, c] + v[c]`
    AddRowVec { x: usize, v: usize },
    /// `out[r, c] = x[r, c] * v[c]`
    MulRowVec { x: usize, v: usize },
    /// `out[r, c] = x[r, c] - v[r]`
    SubColVec { x: usize, v: usize },
    /// `out[r, c] = x[r, c] / v[r]`
    DivColVec { x: usize, v: usize },
    /// `out[r, c] = x[r, c] * v[r]`
    MulColVec { x: usize, v: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// Per-block product: `out[p] = a[p] (m x k) * b[p] (k x n)` for `batch` blocks.
    BmmNN { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    /// Per-block product against transposed right factor: `out[p] = a[p] * b[p]^T`
    /// with `b[p]` stored as `n x k`.
    BmmNT { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    SoftmaxRows { x: usize },
    /// Mean over the last dimension; output has one entry per row.
    RowMean { x: usize },
    /// Repeat the whole block of rows `times` times.
    TileRows { x: usize, times: usize },
    ConcatCols { xs: Vec<usize>, widths: Vec<usize> },
    SliceCols { x: usize, start: usize, width: usize, total: usize },
    GatherRows { table: usize, indices: Rc<Vec<u32>> },
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Mean binary cross-entropy of probabilities against fixed labels.
    BceMean { probs: usize, labels: Rc<Vec<f64>> },
    /// Mean squared error of predictions against a fixed target.
    SqErrMean { pred: usize, target: Rc<Vec<f64>> },
}

impl Op {
    /// Rough forward cost in floating-point operations. Copies count as one
    /// op per element so the estimate stays monotone in tensor size; matrix
    /// products use the exact `2mkn`.
    pub(crate) fn flops(&self, out_numel: usize, nodes: &[Node]) -> u64 {
        let n = out_numel as u64;
        match self {
            Op::Leaf => 0,
            Op::Add(..) | Op::Sub(..) | Op::Mul(..) | Op::Scale(..) | Op::AddScalar(..) => n,
            Op::Sigmoid(_) | Op::Relu(_) | Op::Sqrt(_) => n,
            Op::SmoothStep { .. } => 5 * n,
            Op::AddRowVec { .. } | Op::SubColVec { .. } => n,
            Op::MulRowVec { .. } | Op::DivColVec { .. } | Op::MulColVec { .. } => n,
            Op::MatMul { m, k, n, .. } => 2 * (*m as u64) * (*k as u64) * (*n as u64),
            Op::BmmNN {
                batch, m, k, n, ..
            }
            | Op::BmmNT {
                batch, m, k, n, ..
            } => 2 * (*batch as u64) * (*m as u64) * (*k as u64) * (*n as u64),
            Op::SoftmaxRows { .. } => 5 * n,
            Op::RowMean { x } => nodes[*x].values.len() as u64,
            Op::TileRows { .. }
            | Op::ConcatCols { .. }
            | Op::SliceCols { .. }
            | Op::GatherRows { .. }
            | Op::Reshape(_) => n,
            Op::SumAll(a) | Op::MeanAll(a) => nodes[*a].values.len() as u64,
            Op::BceMean { probs, .. } => 8 * nodes[*probs].values.len() as u64,
            Op::SqErrMean { pred, .. } => 4 * nodes[*pred].values.len() as u64,
        }
    }
}

fn take_grad(nodes: &mut [Node], id: usize, len: usize) -> Vec<f64> {
    match nodes[id].grad.take() {
        Some(g) => g,
        None => vec![0.0; len],
    }
}

fn accumulate(nodes: &mut [Node], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match nodes[id].grad.as_mut() {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(&contribution) {
                *gi += ci;
            }
        }
        None => nodes[id].grad = Some(contribution),
    }
}

/// Rows/cols view of a node treating everything but the last axis as rows.
fn row_view(nodes: &[Node], id: usize) -> (usize, usize) {
    let shape = &nodes[id].shape;
    let cols = *shape.last().expect("row op on rank-0 tensor");
    (nodes[id].values.len() / cols, cols)
}

/// Propagate `dout` of node `id` into its inputs. `out_values` are the saved
/// forward values of node `id` (some rules reuse them instead of recomputing).
pub(crate) fn backprop(nodes: &mut [Node], op: &Op, id: usize, dout: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, *a, dout.to_vec());
            accumulate(nodes, *b, dout.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, dout.to_vec());
            accumulate(nodes, *b, dout.iter().map(|d| -d).collect());
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(&nodes[*b].values)
                    .map(|(d, bv)| d * bv)
                    .collect();
                accumulate(nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                let db: Vec<f64> = dout
                    .iter()
                    .zip(&nodes[*a].values)
                    .map(|(d, av)| d * av)
                    .collect();
                accumulate(nodes, *b, db);
            }
        }
        Op::Scale(a, c) => {
            accumulate(nodes, *a, dout.iter().map(|d| d * c).collect());
        }
        Op::AddScalar(a) => {
            accumulate(nodes, *a, dout.to_vec());
        }
        Op::Sigmoid(a) => {
            let da: Vec<f64> = dout
                .iter()
                .zip(&nodes[id].values)
                .map(|(d, y)| d * y * (1.0 - y))
                .collect();
            accumulate(nodes, *a, da);
        }
        Op::Relu(a) => {
            let da: Vec<f64> = dout
                .iter()
                .zip(&nodes[*a].values)
                .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                .collect();
            accumulate(nodes, *a, da);
        }
        Op::Sqrt(a) => {
            let da: Vec<f64> = dout
                .iter()
                .zip(&nodes[id].values)
                .map(|(d, y)| d * 0.5 / y)
                .collect();
            accumulate(nodes, *a, da);
        }
        Op::SmoothStep { x, gamma } => {
            let g = *gamma;
            let half = g / 2.0;
            let da: Vec<f64> = dout
                .iter()
                .zip(&nodes[*x].values)
                .map(|(d, z)| {
                    if *z <= -half || *z >= half {
                        0.0
                    } else {
                        d * (-(6.0 / (g * g * g)) * z * z + 1.5 / g)
                    }
                })
                .collect();
            accumulate(nodes, *x, da);
        }
        Op::AddRowVec { x, v } => {
            let (rows, cols) = row_view(nodes, *x);
            accumulate(nodes, *x, dout.to_vec());
            if nodes[*v].requires_grad {
                let mut dv = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += dout[r * cols + c];
                    }
                }
                accumulate(nodes, *v, dv);
            }
        }
        Op::MulRowVec { x, v } => {
            let (rows, cols) = row_view(nodes, *x);
            if nodes[*x].requires_grad {
                let vv = &nodes[*v].values;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = dout[r * cols + c] * vv[c];
                    }
                }
                accumulate(nodes, *x, dx);
            }
            if nodes[*v].requires_grad {
                let xv = &nodes[*x].values;
                let mut dv = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += dout[r * cols + c] * xv[r * cols + c];
                    }
                }
                accumulate(nodes, *v, dv);
            }
        }
        Op::SubColVec { x, v } => {
            let (rows, cols) = row_view(nodes, *x);
            accumulate(nodes, *x, dout.to_vec());
            if nodes[*v].requires_grad {
                let mut dv = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[r] -= dout[r * cols + c];
                    }
                }
                accumulate(nodes, *v, dv);
            }
        }
        Op::DivColVec { x, v } => {
            let (rows, cols) = row_view(nodes, *x);
            if nodes[*x].requires_grad {
                let vv = &nodes[*v].values;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = dout[r * cols + c] / vv[r];
                    }
                }
                accumulate(nodes, *x, dx);
            }
            if nodes[*v].requires_grad {
                let xv = &nodes[*x].values;
                let vv = &nodes[*v].values;
                let mut dv = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[r] -= dout[r * cols + c] * xv[r * cols + c] / (vv[r] * vv[r]);
                    }
                }
                accumulate(nodes, *v, dv);
            }
        }
        Op::MulColVec { x, v } => {
            let (rows, cols) = row_view(nodes, *x);
            if nodes[*x].requires_grad {
                let vv = &nodes[*v].values;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = dout[r * cols + c] * vv[r];
                    }
                }
                accumulate(nodes, *x, dx);
            }
            if nodes[*v].requires_grad {
                let xv = &nodes[*x].values;
                let mut dv = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[r] += dout[r * cols + c] * xv[r * cols + c];
                    }
                }
                accumulate(nodes, *v, dv);
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            if nodes[*a].requires_grad {
                let mut da = take_grad(nodes, *a, m * k);
                kernels::matmul_nt_acc(dout, &nodes[*b].values, &mut da, *m, *n, *k);
                nodes[*a].grad = Some(da);
            }
            if nodes[*b].requires_grad {
                let mut db = take_grad(nodes, *b, k * n);
                kernels::matmul_tn_acc(&nodes[*a].values, dout, &mut db, *m, *k, *n);
                nodes[*b].grad = Some(db);
            }
        }
        Op::BmmNN {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (bs, m, k, n) = (*batch, *m, *k, *n);
            if nodes[*a].requires_grad {
                let mut da = take_grad(nodes, *a, bs * m * k);
                for p in 0..bs {
                    kernels::matmul_nt_acc(
                        &dout[p * m * n..(p + 1) * m * n],
                        &nodes[*b].values[p * k * n..(p + 1) * k * n],
                        &mut da[p * m * k..(p + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                nodes[*a].grad = Some(da);
            }
            if nodes[*b].requires_grad {
                let mut db = take_grad(nodes, *b, bs * k * n);
                for p in 0..bs {
                    kernels::matmul_tn_acc(
                        &nodes[*a].values[p * m * k..(p + 1) * m * k],
                        &dout[p * m * n..(p + 1) * m * n],
                        &mut db[p * k * n..(p + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                nodes[*b].grad = Some(db);
            }
        }
        Op::BmmNT {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            // out[p] = a[p] (m x k) * b[p]^T, b[p] stored n x k
            let (bs, m, k, n) = (*batch, *m, *k, *n);
            if nodes[*a].requires_grad {
                let mut da = take_grad(nodes, *a, bs * m * k);
                for p in 0..bs {
                    kernels::matmul_nn_acc(
                        &dout[p * m * n..(p + 1) * m * n],
                        &nodes[*b].values[p * n * k..(p + 1) * n * k],
                        &mut da[p * m * k..(p + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                nodes[*a].grad = Some(da);
            }
            if nodes[*b].requires_grad {
                let mut db = take_grad(nodes, *b, bs * n * k);
                for p in 0..bs {
                    kernels::matmul_tn_acc(
                        &dout[p * m * n..(p + 1) * m * n],
                        &nodes[*a].values[p * m * k..(p + 1) * m * k],
                        &mut db[p * n * k..(p + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
                nodes[*b].grad = Some(db);
            }
        }
        Op::SoftmaxRows { x } => {
            let (rows, cols) = row_view(nodes, *x);
            let y = &nodes[id].values;
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = r * cols..(r + 1) * cols;
                let yr = &y[row.clone()];
                let dr = &dout[row.clone()];
                let dot: f64 = yr.iter().zip(dr).map(|(yi, di)| yi * di).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yr[c] * (dr[c] - dot);
                }
            }
            accumulate(nodes, *x, dx);
        }
        Op::RowMean { x } => {
            let (rows, cols) = row_view(nodes, *x);
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let d = dout[r] / cols as f64;
                for c in 0..cols {
                    dx[r * cols + c] = d;
                }
            }
            accumulate(nodes, *x, dx);
        }
        Op::TileRows { x, times } => {
            let len = nodes[*x].values.len();
            let mut dx = vec![0.0; len];
            for t in 0..*times {
                for i in 0..len {
                    dx[i] += dout[t * len + i];
                }
            }
            accumulate(nodes, *x, dx);
        }
        Op::ConcatCols { xs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = dout.len() / total;
            let mut start = 0;
            for (xi, w) in xs.iter().zip(widths) {
                if nodes[*xi].requires_grad {
                    let mut dx = vec![0.0; rows * w];
                    for r in 0..rows {
                        dx[r * w..(r + 1) * w]
                            .copy_from_slice(&dout[r * total + start..r * total + start + w]);
                    }
                    accumulate(nodes, *xi, dx);
                }
                start += w;
            }
        }
        Op::SliceCols {
            x,
            start,
            width,
            total,
        } => {
            let rows = dout.len() / width;
            let mut dx = vec![0.0; rows * total];
            for r in 0..rows {
                dx[r * total + start..r * total + start + width]
                    .copy_from_slice(&dout[r * width..(r + 1) * width]);
            }
            accumulate(nodes, *x, dx);
        }
        Op::GatherRows { table, indices } => {
            let dim = nodes[*table].shape[1];
            let mut dt = take_grad(nodes, *table, nodes[*table].values.len());
            for (r, &idx) in indices.iter().enumerate() {
                let src = &dout[r * dim..(r + 1) * dim];
                let dst = &mut dt[idx as usize * dim..(idx as usize + 1) * dim];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            nodes[*table].grad = Some(dt);
        }
        Op::Reshape(a) => {
            accumulate(nodes, *a, dout.to_vec());
        }
        Op::SumAll(a) => {
            let d = dout[0];
            let len = nodes[*a].values.len();
            accumulate(nodes, *a, vec![d; len]);
        }
        Op::MeanAll(a) => {
            let len = nodes[*a].values.len();
            let d = dout[0] / len as f64;
            accumulate(nodes, *a, vec![d; len]);
        }
        Op::BceMean { probs, labels } => {
            // Derivative of the *clamped* objective: entries pinned at the
            // clamp bound are constant in the prediction, so their gradient
            // is exactly zero. This keeps analytic and finite-difference
            // gradients consistent everywhere.
            let d = dout[0];
            let n = labels.len() as f64;
            let dp: Vec<f64> = nodes[*probs]
                .values
                .iter()
                .zip(labels.iter())
                .map(|(f, y)| {
                    if *f < BCE_EPS || *f > 1.0 - BCE_EPS {
                        0.0
                    } else {
                        d * (f - y) / (f * (1.0 - f) * n)
                    }
                })
                .collect();
            accumulate(nodes, *probs, dp);
        }
        Op::SqErrMean { pred, target } => {
            let d = dout[0];
            let n = target.len() as f64;
            let dp: Vec<f64> = nodes[*pred]
                .values
                .iter()
                .zip(target.iter())
                .map(|(p, t)| d * 2.0 * (p - t) / n)
                .collect();
            accumulate(nodes, *pred, dp);
        }
    }
}
