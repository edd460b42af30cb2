//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Every value lives on a [`Tape`]: operations append nodes in topological
//! order (an operation can only consume ids that already exist), forward
//! values are computed eagerly, and [`Tape::backward`] walks the recording
//! in reverse to accumulate exact chain-rule gradients into every leaf that
//! was created with `requires_grad`.
//!
//! The op set is exactly what the models need; this is not a
//! general-purpose autodiff engine. Scalars are `[1, 1]` tensors and
//! vectors are single-row or single-column matrices.

pub mod optim;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Clamp bound applied to probabilities inside the binary cross entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Epsilon added to the per-row variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Row-major 2-D shape.
pub type Shape = [usize; 2];

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: values length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Shape,
        len: usize,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("bce_loss: label {value} is not 0 or 1")]
    InvalidLabel { value: f64 },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Shape },
    #[error("{op}: index {index} out of range for dimension of size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("layer_norm: rows must have at least 2 entries, got {cols}")]
    RowTooShort { cols: usize },
    #[error("concat_cols: no inputs given")]
    EmptyConcat,
    #[error("custom op {op}: {reason}")]
    Custom { op: &'static str, reason: String },
}

/// Differentiable operation plugged into the tape from outside this module.
///
/// `forward` sees the input values and shapes and produces the output;
/// `backward` receives the same inputs plus the output values and the
/// gradient flowing into the output, and must return one gradient buffer
/// per input (same lengths as the inputs).
pub trait CustomGrad: Send + Sync {
    fn forward(&self, inputs: &[(&[f64], Shape)]) -> Result<(Vec<f64>, Shape), TensorError>;
    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        out_values: &[f64],
        out_grad: &[f64],
    ) -> Vec<Vec<f64>>;
    fn label(&self) -> &'static str {
        "custom"
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: f64,
    },
    Transpose {
        a: TensorId,
    },
    SoftmaxRows {
        a: TensorId,
    },
    LayerNormRows {
        a: TensorId,
    },
    Gelu {
        a: TensorId,
    },
    LeakyRelu {
        a: TensorId,
        slope: f64,
    },
    Sigmoid {
        a: TensorId,
    },
    SumAll {
        a: TensorId,
    },
    MeanCols {
        a: TensorId,
    },
    MaxCols {
        a: TensorId,
    },
    ConcatRows {
        a: TensorId,
        b: TensorId,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    SliceCols {
        a: TensorId,
        start: usize,
        len: usize,
    },
    Row {
        a: TensorId,
        index: usize,
    },
    BceLoss {
        p: TensorId,
        y: TensorId,
    },
    Custom {
        inputs: Vec<TensorId>,
        f: Arc<dyn CustomGrad>,
    },
}

struct Node {
    values: Vec<f64>,
    shape: Shape,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    requires_grad: bool,
    op: Op,
}

/// Recording of a forward computation plus storage for its gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: Shape) -> usize {
    shape[0] * shape[1]
}

/// Result of 2-D broadcasting; `None` when the shapes are incompatible.
fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

/// Read entry (r, c) of a tensor under broadcast semantics.
#[inline]
fn bcast_at(values: &[f64], shape: Shape, r: usize, c: usize) -> f64 {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    values[rr * shape[1] + cc]
}

/// Accumulate a full-shape gradient back into a possibly-broadcast operand.
fn reduce_into(grad_out: &[f64], out_shape: Shape, target: &mut [f64], target_shape: Shape) {
    let [rows, cols] = out_shape;
    for r in 0..rows {
        for c in 0..cols {
            let rr = if target_shape[0] == 1 { 0 } else { r };
            let cc = if target_shape[1] == 1 { 0 } else { c };
            target[rr * target_shape[1] + cc] += grad_out[r * cols + c];
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a leaf tensor. Leaves with `requires_grad` receive gradients
    /// from [`Tape::backward`].
    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: Shape,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if values.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                op: "leaf",
                shape,
                len: values.len(),
            });
        }
        Ok(self.push(values, shape, requires_grad, requires_grad, Op::Leaf))
    }

    /// Non-trainable leaf (positional tables, inputs, labels).
    pub fn constant(&mut self, values: Vec<f64>, shape: Shape) -> Result<TensorId, TensorError> {
        self.leaf(values, shape, false)
    }

    /// Scalar constant convenience.
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![value], [1, 1], false, false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Gradient of a node, populated by the last [`Tape::backward`] call.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Number of scalars in leaves created with `requires_grad`.
    pub fn trainable_scalars(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .map(|n| n.values.len())
            .sum()
    }

    fn push(
        &mut self,
        values: Vec<f64>,
        shape: Shape,
        needs_grad: bool,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        debug_assert_eq!(values.len(), numel(shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            values,
            shape,
            grad: None,
            needs_grad,
            requires_grad,
            op,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: [m, k],
                rhs: [k2, n],
            });
        }
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, [m, n], needs, false, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.broadcast_binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn broadcast_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa,
            rhs: sb,
        })?;
        let [rows, cols] = out_shape;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(
                    bcast_at(self.values(a), sa, r, c),
                    bcast_at(self.values(b), sb, r, c),
                ));
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, out_shape, needs, false, op))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a);
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::Scale { a, c })
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let [m, n] = self.shape(a);
        let v = self.values(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = v[r * n + c];
            }
        }
        let needs = self.needs(a);
        self.push(out, [n, m], needs, false, Op::Transpose { a })
    }

    /// Row-wise softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        if self.values(a).iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let [m, n] = self.shape(a);
        let v = self.values(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - max).exp();
                out[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                out[r * n + c] /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, [m, n], needs, false, Op::SoftmaxRows { a }))
    }

    /// Standardize every row to mean 0 and population std 1 (no affine
    /// parameters; epsilon keeps constant rows finite and maps them to 0).
    pub fn layer_norm_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let [m, n] = self.shape(a);
        if n < 2 {
            return Err(TensorError::RowTooShort { cols: n });
        }
        let v = self.values(a);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &v[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * inv;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, [m, n], needs, false, Op::LayerNormRows { a }))
    }

    /// Exact Gaussian-CDF GELU: x * Phi(x).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x * gauss_cdf(x)).collect();
        let shape = self.shape(a);
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::Gelu { a })
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a);
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::LeakyRelu { a, slope })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|&x| sigmoid_raw(x)).collect();
        let shape = self.shape(a);
        let needs = self.needs(a);
        self.push(out, shape, needs, false, Op::Sigmoid { a })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![s], [1, 1], needs, false, Op::SumAll { a })
    }

    /// Per-column mean, reducing [m, n] to [1, n].
    pub fn mean_cols(&mut self, a: TensorId) -> TensorId {
        let [m, n] = self.shape(a);
        let v = self.values(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += v[r * n + c];
            }
        }
        for x in &mut out {
            *x /= m as f64;
        }
        let needs = self.needs(a);
        self.push(out, [1, n], needs, false, Op::MeanCols { a })
    }

    /// Per-column maximum, reducing [m, n] to [1, n]. Ties route the
    /// gradient to the first (lowest row index) maximum.
    pub fn max_cols(&mut self, a: TensorId) -> TensorId {
        let [m, n] = self.shape(a);
        let v = self.values(a);
        let mut out = vec![f64::NEG_INFINITY; n];
        for r in 0..m {
            for c in 0..n {
                if v[r * n + c] > out[c] {
                    out[c] = v[r * n + c];
                }
            }
        }
        let needs = self.needs(a);
        self.push(out, [1, n], needs, false, Op::MaxCols { a })
    }

    /// Stack `a` on top of `b` (row counts add, column counts must agree).
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let [ma, na] = self.shape(a);
        let [mb, nb] = self.shape(b);
        if na != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: [ma, na],
                rhs: [mb, nb],
            });
        }
        let mut out = Vec::with_capacity((ma + mb) * na);
        out.extend_from_slice(self.values(a));
        out.extend_from_slice(self.values(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, [ma + mb, na], needs, false, Op::ConcatRows { a, b }))
    }

    /// Concatenate along columns, in the given order.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let [m, _] = self.shape(first);
        let mut total = 0;
        for &p in parts {
            let [mp, np] = self.shape(p);
            if mp != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: [mp, np],
                });
            }
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let [_, np] = self.shape(p);
            let v = self.values(p);
            for r in 0..m {
                out[r * total + offset..r * total + offset + np]
                    .copy_from_slice(&v[r * np..(r + 1) * np]);
            }
            offset += np;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            [m, total],
            needs,
            false,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of `a`.
    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let [m, n] = self.shape(a);
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let v = self.values(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(out, [m, len], needs, false, Op::SliceCols { a, start, len }))
    }

    /// Single row of `a` as a [1, n] tensor.
    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId, TensorError> {
        let [m, n] = self.shape(a);
        if index >= m {
            return Err(TensorError::IndexOutOfRange {
                op: "row",
                index,
                bound: m,
            });
        }
        let out = self.values(a)[index * n..(index + 1) * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(out, [1, n], needs, false, Op::Row { a, index }))
    }

    /// Mean binary cross entropy, -[y ln p + (1-y) ln(1-p)], with p clamped
    /// to [BCE_CLAMP, 1-BCE_CLAMP]. `y` entries must be exactly 0 or 1.
    pub fn bce_loss(&mut self, p: TensorId, y: TensorId) -> Result<TensorId, TensorError> {
        let sp = self.shape(p);
        let sy = self.shape(y);
        if sp != sy {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                lhs: sp,
                rhs: sy,
            });
        }
        for &label in self.values(y) {
            if label != 0.0 && label != 1.0 {
                return Err(TensorError::InvalidLabel { value: label });
            }
        }
        let count = numel(sp) as f64;
        let mut total = 0.0;
        for (&pi, &yi) in self.values(p).iter().zip(self.values(y)) {
            let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        let needs = self.needs(p) || self.needs(y);
        Ok(self.push(
            vec![total / count],
            [1, 1],
            needs,
            false,
            Op::BceLoss { p, y },
        ))
    }

    /// Record an externally defined differentiable operation.
    pub fn custom(
        &mut self,
        inputs: &[TensorId],
        f: Arc<dyn CustomGrad>,
    ) -> Result<TensorId, TensorError> {
        let views: Vec<(&[f64], Shape)> = inputs
            .iter()
            .map(|&i| (self.nodes[i.0].values.as_slice(), self.nodes[i.0].shape))
            .collect();
        let (values, shape) = f.forward(&views)?;
        if values.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                op: f.label(),
                shape,
                len: values.len(),
            });
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(
            values,
            shape,
            needs,
            false,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
        ))
    }

    /// Reverse-accumulate gradients of a scalar loss into every node that
    /// leads to a `requires_grad` leaf. Leaf gradients are always fully
    /// populated after this call (zeros when a leaf does not reach the loss).
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.shape(loss) != [1, 1] {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss),
            });
        }
        for node in &mut self.nodes {
            node.grad = if node.needs_grad {
                Some(vec![0.0; node.values.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any trainable leaf; leaf grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &grad);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let g = self.nodes[id.0].grad.as_mut().expect("grad allocated");
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, node: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = dC * B^T
                    let bv = self.values(*b);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for c in 0..n {
                                s += grad[r * n + c] * bv[p * n + c];
                            }
                            da[r * k + p] = s;
                        }
                    }
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let av = self.values(*a);
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for c in 0..n {
                            let mut s = 0.0;
                            for r in 0..m {
                                s += av[r * k + p] * grad[r * n + c];
                            }
                            db[p * n + c] = s;
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::Add { a, b } => {
                let out_shape = self.nodes[node].shape;
                self.reduce_grad_into(*a, grad, out_shape, 1.0);
                self.reduce_grad_into(*b, grad, out_shape, 1.0);
            }
            Op::Sub { a, b } => {
                let out_shape = self.nodes[node].shape;
                self.reduce_grad_into(*a, grad, out_shape, 1.0);
                self.reduce_grad_into(*b, grad, out_shape, -1.0);
            }
            Op::Mul { a, b } => {
                let out_shape = self.nodes[node].shape;
                let [rows, cols] = out_shape;
                if self.needs(*a) {
                    let sb = self.shape(*b);
                    let bv = self.values(*b);
                    let mut full = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            full[r * cols + c] = grad[r * cols + c] * bcast_at(bv, sb, r, c);
                        }
                    }
                    self.reduce_grad_into(*a, &full, out_shape, 1.0);
                }
                if self.needs(*b) {
                    let sa = self.shape(*a);
                    let av = self.values(*a);
                    let mut full = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            full[r * cols + c] = grad[r * cols + c] * bcast_at(av, sa, r, c);
                        }
                    }
                    self.reduce_grad_into(*b, &full, out_shape, 1.0);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.add_grad(*a, &da);
            }
            Op::Transpose { a } => {
                let [m, n] = self.shape(*a);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = grad[c * m + r];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::SoftmaxRows { a } => {
                let [m, n] = self.nodes[node].shape;
                let y = &self.nodes[node].values;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &grad[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::LayerNormRows { a } => {
                let [m, n] = self.shape(*a);
                let x = self.values(*a);
                let y = &self.nodes[node].values;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let xr = &x[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &grad[r * n..(r + 1) * n];
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(g, yv)| g * yv).sum::<f64>() / n as f64;
                    for c in 0..n {
                        da[r * n + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::Gelu { a } => {
                let x = self.values(*a);
                let da: Vec<f64> = grad
                    .iter()
                    .zip(x)
                    .map(|(g, &xi)| g * (gauss_cdf(xi) + xi * gauss_pdf(xi)))
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::LeakyRelu { a, slope } => {
                let x = self.values(*a);
                let da: Vec<f64> = grad
                    .iter()
                    .zip(x)
                    .map(|(g, &xi)| g * if xi > 0.0 { 1.0 } else { *slope })
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[node].values;
                let da: Vec<f64> = grad
                    .iter()
                    .zip(y)
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::SumAll { a } => {
                let len = self.values(*a).len();
                let da = vec![grad[0]; len];
                self.add_grad(*a, &da);
            }
            Op::MeanCols { a } => {
                let [m, n] = self.shape(*a);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = grad[c] / m as f64;
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::MaxCols { a } => {
                let [m, n] = self.shape(*a);
                let v = self.values(*a);
                let mut da = vec![0.0; m * n];
                for c in 0..n {
                    let mut best = 0;
                    for r in 1..m {
                        if v[r * n + c] > v[best * n + c] {
                            best = r;
                        }
                    }
                    da[best * n + c] = grad[c];
                }
                self.add_grad(*a, &da);
            }
            Op::ConcatRows { a, b } => {
                let [ma, n] = self.shape(*a);
                let [mb, _] = self.shape(*b);
                self.add_grad(*a, &grad[..ma * n]);
                self.add_grad(*b, &grad[ma * n..(ma + mb) * n]);
            }
            Op::ConcatCols { parts } => {
                let [m, total] = self.nodes[node].shape;
                let mut offset = 0;
                for &p in parts {
                    let [_, np] = self.shape(p);
                    if self.needs(p) {
                        let mut dp = vec![0.0; m * np];
                        for r in 0..m {
                            dp[r * np..(r + 1) * np].copy_from_slice(
                                &grad[r * total + offset..r * total + offset + np],
                            );
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += np;
                }
            }
            Op::SliceCols { a, start, len } => {
                let [m, n] = self.shape(*a);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + len]
                        .copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                self.add_grad(*a, &da);
            }
            Op::Row { a, index } => {
                let [m, n] = self.shape(*a);
                let mut da = vec![0.0; m * n];
                da[index * n..(index + 1) * n].copy_from_slice(grad);
                self.add_grad(*a, &da);
            }
            Op::BceLoss { p, y } => {
                if self.needs(*p) {
                    let count = self.values(*p).len() as f64;
                    let pv = self.values(*p);
                    let yv = self.values(*y);
                    let g = grad[0];
                    let mut dp = vec![0.0; pv.len()];
                    for i in 0..pv.len() {
                        // Gradient is zero where the clamp saturates.
                        if pv[i] > BCE_CLAMP && pv[i] < 1.0 - BCE_CLAMP {
                            dp[i] = g * (-yv[i] / pv[i] + (1.0 - yv[i]) / (1.0 - pv[i])) / count;
                        }
                    }
                    self.add_grad(*p, &dp);
                }
            }
            Op::Custom { inputs, f } => {
                let views: Vec<(&[f64], Shape)> = inputs
                    .iter()
                    .map(|&i| (self.nodes[i.0].values.as_slice(), self.nodes[i.0].shape))
                    .collect();
                let grads = f.backward(&views, &self.nodes[node].values, grad);
                debug_assert_eq!(grads.len(), inputs.len());
                let pairs: Vec<(TensorId, Vec<f64>)> = inputs.iter().cloned().zip(grads).collect();
                for (id, g) in pairs {
                    self.add_grad(id, &g);
                }
            }
        }
    }

    fn reduce_grad_into(&mut self, target: TensorId, grad: &[f64], out_shape: Shape, sign: f64) {
        if !self.needs(target) {
            return;
        }
        let ts = self.shape(target);
        let mut acc = vec![0.0; numel(ts)];
        if sign == 1.0 {
            reduce_into(grad, out_shape, &mut acc, ts);
        } else {
            let flipped: Vec<f64> = grad.iter().map(|g| g * sign).collect();
            reduce_into(&flipped, out_shape, &mut acc, ts);
        }
        self.add_grad(target, &acc);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

#[inline]
fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, values: &[f64], shape: Shape) -> TensorId {
        tape.leaf(values.to_vec(), shape, true).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = leaf(&mut tape, &[1.0, 0.0, 0.0, 1.0], [2, 2]);
        let m = leaf(&mut tape, &[3.0, -1.0, 2.0, 5.0], [2, 2]);
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.values(out), tape.values(m));
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0], [2, 2]);
        let b = leaf(&mut tape, &[1.0, 1.0], [2, 1]);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[0.0; 6], [2, 3]);
        let b = leaf(&mut tape, &[0.0; 4], [2, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[5.0, 5.0, 5.0, 5.0], [1, 4]);
        let out = tape.softmax_rows(a).unwrap();
        for &v in tape.values(out) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] -> [1/4, 3/4]
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[0.0, 3.0_f64.ln()], [1, 2]);
        let out = tape.softmax_rows(a).unwrap();
        let v = tape.values(out);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_column_is_ones() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[-3.0, 0.5, 9.0], [3, 1]);
        let out = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.values(out), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[f64::NAN, 0.0], [1, 2]);
        assert!(matches!(
            tape.softmax_rows(a),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0, 1.0, 1.0, 1.0], [1, 4]);
        let out = tape.layer_norm_rows(a).unwrap();
        for &v in tape.values(out) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[0.0, 2.0], [1, 2]);
        let out = tape.layer_norm_rows(a).unwrap();
        let v = tape.values(out);
        assert!((v[0] + 1.0).abs() < 1e-4);
        assert!((v[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_random_row_standardized() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16)
            .map(|i| ((i * 37 + 11) % 23) as f64 * 0.37 - 2.0)
            .collect();
        let a = leaf(&mut tape, &vals, [1, 16]);
        let out = tape.layer_norm_rows(a).unwrap();
        let v = tape.values(out);
        let mean = v.iter().sum::<f64>() / 16.0;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!((std - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn layer_norm_single_column_rejected() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1.0], [1, 1]);
        assert!(matches!(
            tape.layer_norm_rows(a),
            Err(TensorError::RowTooShort { cols: 1 })
        ));
    }

    #[test]
    fn activation_fixed_points() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[0.0, -1.0], [1, 2]);
        let g = tape.gelu(a);
        assert_eq!(tape.values(g)[0], 0.0);
        let s = tape.sigmoid(a);
        assert_eq!(tape.values(s)[0], 0.5);
        let l = tape.leaky_relu(a, 0.01);
        assert!((tape.values(l)[1] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn bce_coin_flip_is_ln2() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[0.5, 0.5], [1, 2]);
        let y = tape.constant(vec![1.0, 0.0], [1, 2]).unwrap();
        let loss = tape.bce_loss(p, y).unwrap();
        assert!((tape.values(loss)[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_hits_clamp_floor() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[1.0, 0.0], [1, 2]);
        let y = tape.constant(vec![1.0, 0.0], [1, 2]).unwrap();
        let loss = tape.bce_loss(p, y).unwrap();
        assert!(tape.values(loss)[0] < 1e-6);
        assert!(tape.values(loss)[0] > 0.0);
    }

    #[test]
    fn bce_closed_form() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[0.9, 0.1], [1, 2]);
        let y = tape.constant(vec![1.0, 0.0], [1, 2]).unwrap();
        let loss = tape.bce_loss(p, y).unwrap();
        assert!((tape.values(loss)[0] - (-0.9_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_label() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, &[0.5], [1, 1]);
        let y = tape.constant(vec![0.5], [1, 1]).unwrap();
        assert!(matches!(
            tape.bce_loss(p, y),
            Err(TensorError::InvalidLabel { value }) if value == 0.5
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1.0, -2.0, 0.5, 4.0], [2, 2]);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_squared_norm_is_2w() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1.0, -2.0, 0.5], [1, 3]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        for (gi, wi) in g.iter().zip(tape.values(w)) {
            assert!((gi - 2.0 * wi).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1.0, 2.0], [1, 2]);
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, &[1.0], [1, 1]);
        let unused = leaf(&mut tape, &[5.0, 5.0], [1, 2]);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn outer_broadcast_sub() {
        // column [3,1] minus row [1,3] -> full [3,3] difference table
        let mut tape = Tape::new();
        let q = leaf(&mut tape, &[1.0, 2.0, 3.0], [3, 1]);
        let k = leaf(&mut tape, &[10.0, 20.0, 30.0], [1, 3]);
        let d = tape.sub(q, k).unwrap();
        assert_eq!(tape.shape(d), [3, 3]);
        assert_eq!(tape.values(d)[0], -9.0);
        assert_eq!(tape.values(d)[5], -28.0);
        let loss = tape.sum_all(d);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(q).unwrap(), &[3.0, 3.0, 3.0]);
        assert_eq!(tape.grad(k).unwrap(), &[-3.0, -3.0, -3.0]);
    }

    #[test]
    fn max_cols_ties_go_to_first_row() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2.0, 0.0, 2.0, 1.0], [2, 2]);
        let m = tape.max_cols(a);
        assert_eq!(tape.values(m), &[2.0, 1.0]);
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape
                .leaf(vec![0.3, -0.7, 1.9, 0.2, 0.5, -1.1], [2, 3], true)
                .unwrap();
            let b = tape
                .leaf(vec![0.11, 0.22, -0.4, 0.9, 1.3, -0.5], [3, 2], true)
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let n = tape.layer_norm_rows(c).unwrap();
            let s = tape.softmax_rows(n).unwrap();
            let g = tape.gelu(s);
            let out = tape.sum_all(g);
            tape.values(out).to_vec()
        };
        assert_eq!(build(), build());
    }
}
