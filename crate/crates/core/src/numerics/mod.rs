//! Dense f64 tensors with taped reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to tensors created on it.
//! Forward evaluation is eager; [`Tape::backward`] replays the record in
//! reverse and accumulates gradients into every node, leaving them in place
//! on leaf parameters. Running backward twice without clearing gradients
//! therefore doubles them — callers that want fresh gradients build a fresh
//! tape per step or call [`Tape::zero_grad`].
//!
//! Tensors hold an `Rc` to their tape, so a tape and its tensors are confined
//! to one thread; independent tapes can live on different threads, and plain
//! parameter snapshots (`Vec<f64>`) move freely between them.

mod kernels;
mod op;

pub mod check;

pub use check::finite_diff_check;
pub use op::BCE_EPS;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use op::Op;
use thiserror::Error;

/// Additive variance floor used by [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("softmax input contains a non-finite value")]
    NonFiniteInput,
    #[error("layer_norm requires at least one element per row")]
    EmptyRows,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub(crate) struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    is_leaf: bool,
    op: Op,
}

#[derive(Default)]
struct Graph {
    nodes: Vec<Node>,
}

/// Records ops applied to its tensors and replays them for gradients.
#[derive(Clone, Default)]
pub struct Tape {
    g: Rc<RefCell<Graph>>,
}

/// Handle to one node on a tape. Cloning is cheap (id + tape pointer).
#[derive(Clone)]
pub struct DiffTensor {
    g: Rc<RefCell<Graph>>,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, is_leaf: bool, op: Op) -> DiffTensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut g = self.g.borrow_mut();
        g.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            is_leaf,
            op,
        });
        DiffTensor {
            g: Rc::clone(&self.g),
            id: g.nodes.len() - 1,
        }
    }

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn input(&self, shape: &[usize], values: Vec<f64>) -> DiffTensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "input shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(shape.to_vec(), values, false, true, Op::Leaf)
    }

    /// Trainable leaf: gradient accumulates here and survives backward.
    pub fn param(&self, shape: &[usize], values: Vec<f64>) -> DiffTensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "param shape {:?} does not match {} values",
            shape,
            values.len()
        );
        self.push(shape.to_vec(), values, true, true, Op::Leaf)
    }

    /// Reverse pass from a scalar. Gradients accumulate additively: calling
    /// this twice without [`Tape::zero_grad`] doubles every leaf gradient.
    pub fn backward(&self, loss: &DiffTensor) -> Result<(), NumericsError> {
        assert!(Rc::ptr_eq(&self.g, &loss.g), "loss lives on a different tape");
        let mut g = self.g.borrow_mut();
        if g.nodes[loss.id].values.len() != 1 {
            return Err(NumericsError::NonScalarLoss(g.nodes[loss.id].shape.clone()));
        }
        match g.nodes[loss.id].grad.as_mut() {
            Some(seed) => seed[0] += 1.0,
            None => g.nodes[loss.id].grad = Some(vec![1.0]),
        }
        for id in (0..=loss.id).rev() {
            if g.nodes[id].is_leaf {
                continue; // leaf gradients stay in place
            }
            let Some(dout) = g.nodes[id].grad.take() else {
                continue;
            };
            let o = g.nodes[id].op.clone();
            op::backprop(&mut g.nodes, &o, id, &dout);
        }
        Ok(())
    }

    /// Drop every gradient on the tape, leaf parameters included.
    pub fn zero_grad(&self) {
        for node in self.g.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    /// Forward cost of everything recorded so far, in (approximate) FLOPs.
    /// Matrix products are exact `2mkn`; elementwise ops and copies count one
    /// per element.
    pub fn flops(&self) -> u64 {
        let g = self.g.borrow();
        g.nodes
            .iter()
            .map(|n| n.op.flops(n.values.len(), &g.nodes))
            .sum()
    }

    pub fn node_count(&self) -> usize {
        self.g.borrow().nodes.len()
    }
}

impl DiffTensor {
    pub fn shape(&self) -> Vec<usize> {
        self.g.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.g.borrow().nodes[self.id].values.len()
    }

    /// Copy of the forward values.
    pub fn values(&self) -> Vec<f64> {
        self.g.borrow().nodes[self.id].values.clone()
    }

    /// Borrowed view of the forward values (no copy).
    pub fn values_ref(&self) -> Ref<'_, [f64]> {
        Ref::map(self.g.borrow(), |g| g.nodes[self.id].values.as_slice())
    }

    /// Scalar value; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        let g = self.g.borrow();
        assert_eq!(g.nodes[self.id].values.len(), 1, "item() on non-scalar");
        g.nodes[self.id].values[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.g.borrow().nodes[self.id].grad.clone()
    }

    fn tape(&self) -> Tape {
        Tape { g: Rc::clone(&self.g) }
    }

    fn assert_same_tape(&self, other: &DiffTensor) {
        assert!(Rc::ptr_eq(&self.g, &other.g), "operands live on different tapes");
    }

    fn req(&self) -> bool {
        self.g.borrow().nodes[self.id].requires_grad
    }

    /// Rows/cols treating all leading axes as rows.
    fn row_view(&self) -> (usize, usize) {
        let g = self.g.borrow();
        let n = &g.nodes[self.id];
        let cols = *n.shape.last().expect("row op on rank-0 tensor");
        assert!(cols > 0, "row op on zero-width rows");
        (n.values.len() / cols, cols)
    }

    fn zip_elementwise(&self, other: &DiffTensor, f: impl Fn(f64, f64) -> f64, op: Op) -> DiffTensor {
        self.assert_same_tape(other);
        let (shape, values) = {
            let g = self.g.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            assert_eq!(a.shape, b.shape, "elementwise shape mismatch");
            let values = a.values.iter().zip(&b.values).map(|(x, y)| f(*x, *y)).collect();
            (a.shape.clone(), values)
        };
        let rg = self.req() || other.req();
        self.tape().push(shape, values, rg, false, op)
    }

    fn map_unary(&self, f: impl Fn(f64) -> f64, op: Op) -> DiffTensor {
        let (shape, values) = {
            let g = self.g.borrow();
            let a = &g.nodes[self.id];
            (a.shape.clone(), a.values.iter().map(|x| f(*x)).collect())
        };
        self.tape().push(shape, values, self.req(), false, op)
    }

    pub fn add(&self, other: &DiffTensor) -> DiffTensor {
        self.zip_elementwise(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &DiffTensor) -> DiffTensor {
        self.zip_elementwise(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &DiffTensor) -> DiffTensor {
        self.zip_elementwise(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> DiffTensor {
        self.map_unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> DiffTensor {
        self.map_unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn sigmoid(&self) -> DiffTensor {
        self.map_unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn relu(&self) -> DiffTensor {
        self.map_unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn sqrt(&self) -> DiffTensor {
        self.map_unary(f64::sqrt, Op::Sqrt(self.id))
    }

    /// Piecewise-cubic smooth step: 0 below `-gamma/2`, 1 above `gamma/2`,
    /// and `-(2/gamma^3) z^3 + (3/(2 gamma)) z + 1/2` in between.
    pub fn smooth_step(&self, gamma: f64) -> DiffTensor {
        assert!(gamma > 0.0, "smooth_step needs gamma > 0, got {gamma}");
        self.map_unary(|z| smooth_step_scalar(z, gamma), Op::SmoothStep { x: self.id, gamma })
    }

    /// Broadcast add of a length-`cols` vector over every row.
    pub fn add_row_vec(&self, v: &DiffTensor) -> DiffTensor {
        self.assert_same_tape(v);
        let (rows, cols) = self.row_view();
        assert_eq!(v.numel(), cols, "row vector length != column count");
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            let vv = &g.nodes[v.id].values;
            let mut out = x.clone();
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] += vv[c];
                }
            }
            out
        };
        let rg = self.req() || v.req();
        self.tape()
            .push(self.shape(), values, rg, false, Op::AddRowVec { x: self.id, v: v.id })
    }

    /// Broadcast multiply by a length-`cols` vector over every row.
    pub fn mul_row_vec(&self, v: &DiffTensor) -> DiffTensor {
        self.assert_same_tape(v);
        let (rows, cols) = self.row_view();
        assert_eq!(v.numel(), cols, "row vector length != column count");
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            let vv = &g.nodes[v.id].values;
            let mut out = x.clone();
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] *= vv[c];
                }
            }
            out
        };
        let rg = self.req() || v.req();
        self.tape()
            .push(self.shape(), values, rg, false, Op::MulRowVec { x: self.id, v: v.id })
    }

    /// Subtract a per-row scalar (length-`rows` vector) from every entry of its row.
    pub fn sub_col_vec(&self, v: &DiffTensor) -> DiffTensor {
        self.col_broadcast(v, |x, s| x - s, |x, v| Op::SubColVec { x, v })
    }

    /// Divide every row by its per-row scalar.
    pub fn div_col_vec(&self, v: &DiffTensor) -> DiffTensor {
        self.col_broadcast(v, |x, s| x / s, |x, v| Op::DivColVec { x, v })
    }

    /// Multiply every row by its per-row scalar.
    pub fn mul_col_vec(&self, v: &DiffTensor) -> DiffTensor {
        self.col_broadcast(v, |x, s| x * s, |x, v| Op::MulColVec { x, v })
    }

    fn col_broadcast(
        &self,
        v: &DiffTensor,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize) -> Op,
    ) -> DiffTensor {
        self.assert_same_tape(v);
        let (rows, cols) = self.row_view();
        assert_eq!(v.numel(), rows, "column vector length != row count");
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            let vv = &g.nodes[v.id].values;
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                for c in 0..cols {
                    out[r * cols + c] = f(x[r * cols + c], vv[r]);
                }
            }
            out
        };
        let rg = self.req() || v.req();
        self.tape().push(self.shape(), values, rg, false, mk(self.id, v.id))
    }

    /// `self (m x k) * b (k x n)`.
    pub fn matmul(&self, b: &DiffTensor) -> DiffTensor {
        self.assert_same_tape(b);
        let sa = self.shape();
        let sb = b.shape();
        assert_eq!(sa.len(), 2, "matmul lhs must be rank 2, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be rank 2, got {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dims differ: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = {
            let g = self.g.borrow();
            let mut out = vec![0.0; m * n];
            kernels::matmul_nn(&g.nodes[self.id].values, &g.nodes[b.id].values, &mut out, m, k, n);
            out
        };
        let rg = self.req() || b.req();
        self.tape().push(
            vec![m, n],
            values,
            rg,
            false,
            Op::MatMul { a: self.id, b: b.id, m, k, n },
        )
    }

    /// Blockwise product: `batch` independent `m x k` by `k x n` products.
    /// `self` is stored `(batch*m) x k`, `b` is `(batch*k) x n`.
    pub fn bmm_nn(&self, b: &DiffTensor, batch: usize) -> DiffTensor {
        self.assert_same_tape(b);
        let sa = self.shape();
        let sb = b.shape();
        assert_eq!(sa.len(), 2, "bmm lhs must be rank 2");
        assert_eq!(sb.len(), 2, "bmm rhs must be rank 2");
        let k = sa[1];
        assert_eq!(sa[0] % batch, 0, "bmm lhs rows not divisible by batch");
        assert_eq!(sb[0], batch * k, "bmm rhs rows != batch * k");
        let m = sa[0] / batch;
        let n = sb[1];
        let values = {
            let g = self.g.borrow();
            let av = &g.nodes[self.id].values;
            let bv = &g.nodes[b.id].values;
            let mut out = vec![0.0; batch * m * n];
            for p in 0..batch {
                kernels::matmul_nn(
                    &av[p * m * k..(p + 1) * m * k],
                    &bv[p * k * n..(p + 1) * k * n],
                    &mut out[p * m * n..(p + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        };
        let rg = self.req() || b.req();
        self.tape().push(
            vec![batch * m, n],
            values,
            rg,
            false,
            Op::BmmNN { a: self.id, b: b.id, batch, m, k, n },
        )
    }

    /// Blockwise product against a transposed right factor: `batch`
    /// independent `m x k` by `(n x k)^T` products. `self` is stored
    /// `(batch*m) x k`, `b` is `(batch*n) x k`.
    pub fn bmm_nt(&self, b: &DiffTensor, batch: usize) -> DiffTensor {
        self.assert_same_tape(b);
        let sa = self.shape();
        let sb = b.shape();
        assert_eq!(sa.len(), 2, "bmm lhs must be rank 2");
        assert_eq!(sb.len(), 2, "bmm rhs must be rank 2");
        let k = sa[1];
        assert_eq!(sb[1], k, "bmm_nt inner dim mismatch");
        assert_eq!(sa[0] % batch, 0, "bmm lhs rows not divisible by batch");
        assert_eq!(sb[0] % batch, 0, "bmm rhs rows not divisible by batch");
        let m = sa[0] / batch;
        let n = sb[0] / batch;
        let values = {
            let g = self.g.borrow();
            let av = &g.nodes[self.id].values;
            let bv = &g.nodes[b.id].values;
            let mut out = vec![0.0; batch * m * n];
            for p in 0..batch {
                kernels::matmul_nt(
                    &av[p * m * k..(p + 1) * m * k],
                    &bv[p * n * k..(p + 1) * n * k],
                    &mut out[p * m * n..(p + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            out
        };
        let rg = self.req() || b.req();
        self.tape().push(
            vec![batch * m, n],
            values,
            rg,
            false,
            Op::BmmNT { a: self.id, b: b.id, batch, m, k, n },
        )
    }

    /// Row-wise softmax with max subtraction. Errors if any input entry is
    /// non-finite (a silent NaN here would poison the whole loss).
    pub fn softmax_rows(&self) -> Result<DiffTensor, NumericsError> {
        let (rows, cols) = self.row_view();
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteInput);
            }
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for c in 0..cols {
                    let e = (row[c] - max).exp();
                    out[r * cols + c] = e;
                    sum += e;
                }
                for c in 0..cols {
                    out[r * cols + c] /= sum;
                }
            }
            out
        };
        Ok(self
            .tape()
            .push(self.shape(), values, self.req(), false, Op::SoftmaxRows { x: self.id }))
    }

    /// Mean over the last axis; result shape is the leading axes.
    pub fn row_mean(&self) -> DiffTensor {
        let (rows, cols) = self.row_view();
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            (0..rows)
                .map(|r| x[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64)
                .collect()
        };
        let mut shape = self.shape();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape()
            .push(shape, values, self.req(), false, Op::RowMean { x: self.id })
    }

    /// Stack `times` copies of the whole tensor along the row axis.
    pub fn tile_rows(&self, times: usize) -> DiffTensor {
        assert!(times > 0);
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "tile_rows expects rank 2");
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            let mut out = Vec::with_capacity(x.len() * times);
            for _ in 0..times {
                out.extend_from_slice(x);
            }
            out
        };
        self.tape().push(
            vec![shape[0] * times, shape[1]],
            values,
            self.req(),
            false,
            Op::TileRows { x: self.id, times },
        )
    }

    /// Keep `width` columns starting at `start`.
    pub fn slice_cols(&self, start: usize, width: usize) -> DiffTensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "slice_cols expects rank 2");
        let (rows, total) = (shape[0], shape[1]);
        assert!(start + width <= total, "column slice out of range");
        let values = {
            let g = self.g.borrow();
            let x = &g.nodes[self.id].values;
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                out.extend_from_slice(&x[r * total + start..r * total + start + width]);
            }
            out
        };
        self.tape().push(
            vec![rows, width],
            values,
            self.req(),
            false,
            Op::SliceCols { x: self.id, start, width, total },
        )
    }

    /// Select rows of a rank-2 table by index, duplicates allowed. Gradient
    /// scatter-adds back into the table.
    pub fn gather_rows(&self, indices: &[u32]) -> DiffTensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "gather_rows expects a rank-2 table");
        let (rows, dim) = (shape[0], shape[1]);
        let values = {
            let g = self.g.borrow();
            let t = &g.nodes[self.id].values;
            let mut out = Vec::with_capacity(indices.len() * dim);
            for &i in indices {
                assert!((i as usize) < rows, "gather index {i} out of range ({rows} rows)");
                out.extend_from_slice(&t[i as usize * dim..(i as usize + 1) * dim]);
            }
            out
        };
        self.tape().push(
            vec![indices.len(), dim],
            values,
            self.req(),
            false,
            Op::GatherRows { table: self.id, indices: Rc::new(indices.to_vec()) },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> DiffTensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape {:?} does not preserve element count",
            shape
        );
        let values = self.values();
        self.tape()
            .push(shape.to_vec(), values, self.req(), false, Op::Reshape(self.id))
    }

    pub fn sum_all(&self) -> DiffTensor {
        let s = self.values_ref().iter().sum();
        self.tape()
            .push(vec![1], vec![s], self.req(), false, Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> DiffTensor {
        let n = self.numel();
        assert!(n > 0, "mean of empty tensor");
        let s = self.values_ref().iter().sum::<f64>() / n as f64;
        self.tape()
            .push(vec![1], vec![s], self.req(), false, Op::MeanAll(self.id))
    }

    /// Mean binary cross-entropy against fixed labels, with predictions
    /// clamped into `[BCE_EPS, 1 - BCE_EPS]`. Returns the scalar loss and the
    /// number of entries that hit the clamp.
    pub fn bce_mean(&self, labels: &[f64]) -> (DiffTensor, usize) {
        assert_eq!(self.numel(), labels.len(), "prediction/label count mismatch");
        assert!(!labels.is_empty(), "bce over empty batch");
        let (sum, clamped) = {
            let g = self.g.borrow();
            let p = &g.nodes[self.id].values;
            let mut sum = 0.0;
            let mut clamped = 0usize;
            for (f, y) in p.iter().zip(labels) {
                let fc = if *f < BCE_EPS {
                    clamped += 1;
                    BCE_EPS
                } else if *f > 1.0 - BCE_EPS {
                    clamped += 1;
                    1.0 - BCE_EPS
                } else {
                    *f
                };
                sum += -y * fc.ln() - (1.0 - y) * (1.0 - fc).ln();
            }
            (sum, clamped)
        };
        let out = self.tape().push(
            vec![1],
            vec![sum / labels.len() as f64],
            self.req(),
            false,
            Op::BceMean { probs: self.id, labels: Rc::new(labels.to_vec()) },
        );
        (out, clamped)
    }

    /// Mean squared error against a fixed target.
    pub fn sq_err_mean(&self, target: &[f64]) -> DiffTensor {
        assert_eq!(self.numel(), target.len(), "prediction/target count mismatch");
        assert!(!target.is_empty(), "squared error over empty batch");
        let sum: f64 = {
            let g = self.g.borrow();
            g.nodes[self.id]
                .values
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum()
        };
        self.tape().push(
            vec![1],
            vec![sum / target.len() as f64],
            self.req(),
            false,
            Op::SqErrMean { pred: self.id, target: Rc::new(target.to_vec()) },
        )
    }
}

/// Scalar smooth step used by the op and by schedule-level code.
pub fn smooth_step_scalar(z: f64, gamma: f64) -> f64 {
    let half = gamma / 2.0;
    if z <= -half {
        0.0
    } else if z >= half {
        1.0
    } else {
        -(2.0 / (gamma * gamma * gamma)) * z * z * z + (1.5 / gamma) * z + 0.5
    }
}

/// Concatenate along columns; all parts must share their row count.
pub fn concat_cols(parts: &[&DiffTensor]) -> DiffTensor {
    assert!(!parts.is_empty(), "concat of nothing");
    let first = parts[0];
    let mut widths = Vec::with_capacity(parts.len());
    let mut rows = None;
    for p in parts {
        first.assert_same_tape(p);
        let s = p.shape();
        assert_eq!(s.len(), 2, "concat_cols expects rank 2 parts");
        match rows {
            None => rows = Some(s[0]),
            Some(r) => assert_eq!(r, s[0], "concat_cols row mismatch"),
        }
        widths.push(s[1]);
    }
    let rows = rows.unwrap();
    let total: usize = widths.iter().sum();
    let values = {
        let g = first.g.borrow();
        let mut out = vec![0.0; rows * total];
        let mut start = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let x = &g.nodes[p.id].values;
            for r in 0..rows {
                out[r * total + start..r * total + start + w]
                    .copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            start += w;
        }
        out
    };
    let rg = parts.iter().any(|p| p.req());
    first.tape().push(
        vec![rows, total],
        values,
        rg,
        false,
        Op::ConcatCols { xs: parts.iter().map(|p| p.id).collect(), widths },
    )
}

/// Layer normalization over the last axis with learned per-column gain and
/// bias: `gain * (x - mean) / sqrt(var + LN_EPS) + bias`, population variance.
/// Built from primitives so it differentiates for free.
pub fn layer_norm(x: &DiffTensor, gain: &DiffTensor, bias: &DiffTensor) -> Result<DiffTensor, NumericsError> {
    let shape = x.shape();
    let cols = *shape.last().ok_or(NumericsError::EmptyRows)?;
    if cols == 0 {
        return Err(NumericsError::EmptyRows);
    }
    if gain.numel() != cols || bias.numel() != cols {
        return Err(NumericsError::ShapeMismatch(format!(
            "layer_norm over {cols} columns given gain of {} and bias of {}",
            gain.numel(),
            bias.numel()
        )));
    }
    let mean = x.row_mean();
    let centered = x.sub_col_vec(&mean);
    let var = centered.mul(&centered).row_mean();
    let denom = var.add_scalar(LN_EPS).sqrt();
    let normed = centered.div_col_vec(&denom);
    Ok(normed.mul_row_vec(gain).add_row_vec(bias))
}
