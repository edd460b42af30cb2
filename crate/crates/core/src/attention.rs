//! Classical and hybrid multi-head attention.
//!
//! Both kinds map a (tokens x d_t) matrix to a same-shape matrix by
//! splitting columns into n_h blocks of width d_h, running one head per
//! block, and concatenating the outputs in head order.
//!
//! A classical head is SoftMax((xW_K)(xW_Q)^T / sqrt(d_h)) (xW_V).
//!
//! A hybrid head evaluates, per token row x_i: scalars K_i and Q_i as
//! <Z_0> of the key/query circuits, the value row V_i as <Z_j> per qubit
//! of the value circuit, the score matrix A_ij = -(Q_i - K_j)^2, and
//! returns SoftMax(A / sqrt(d_h)) V. Gradients of the circuit nodes flow
//! through the tape via the configured qsim backend.

use std::sync::Arc;

use thiserror::Error;

use crate::qsim::grad::{vjp, GradBackend};
use crate::qsim::{Circuit, QsimError, Role};
use crate::tensor::{CustomGrad, Shape, Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("token width {d_t} is not divisible by {n_h} heads")]
    HeadSplit { d_t: usize, n_h: usize },
    #[error("head weight {name} must be [{d_h}, {d_h}], got {shape:?}")]
    BadWeightShape {
        name: &'static str,
        d_h: usize,
        shape: Shape,
    },
    #[error("{role} parameters must be a [1, {expected}] row, got {shape:?}")]
    BadParamShape {
        role: Role,
        expected: usize,
        shape: Shape,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Tape handles for one classical head: three trainable d_h x d_h blocks.
#[derive(Debug, Clone, Copy)]
pub struct ClassicalHeadParams {
    pub w_k: TensorId,
    pub w_q: TensorId,
    pub w_v: TensorId,
}

/// Tape handles for one hybrid head: 3d_h+1 angles for key and query,
/// 3d_h for value (9d_h+2 trainable scalars in total).
#[derive(Debug, Clone, Copy)]
pub struct HybridHeadParams {
    pub theta_k: TensorId,
    pub theta_q: TensorId,
    pub theta_v: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub enum HeadParams {
    Classical(ClassicalHeadParams),
    Hybrid(HybridHeadParams),
}

/// Knobs shared by every hybrid head.
#[derive(Debug, Clone, Copy)]
pub struct HybridOptions {
    /// Multiplier applied to token entries before they become loader
    /// angles. LayerNorm upstream keeps inputs O(1); default 1.
    pub angle_scale: f64,
    pub backend: GradBackend,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            angle_scale: 1.0,
            backend: GradBackend::default(),
        }
    }
}

/// Intermediate tensors of one hybrid head, exposed for inspection; the
/// invariants on A (entries in [-4, 0], transpose under K/Q swap) are
/// stated on `scores`.
#[derive(Debug, Clone, Copy)]
pub struct HybridHeadParts {
    pub output: TensorId,
    /// Pre-softmax score matrix A, tokens x tokens.
    pub scores: TensorId,
    /// Row-stochastic attention weights, SoftMax(A / sqrt(d_h)).
    pub attention: TensorId,
    /// Value matrix V, tokens x d_h.
    pub values: TensorId,
}

/// Classical head output plus its row-stochastic attention weights.
#[derive(Debug, Clone, Copy)]
pub struct ClassicalHeadParts {
    pub output: TensorId,
    pub attention: TensorId,
}

pub fn classical_head(
    tape: &mut Tape,
    x: TensorId,
    params: &ClassicalHeadParams,
) -> Result<TensorId, AttentionError> {
    Ok(classical_head_parts(tape, x, params)?.output)
}

pub fn classical_head_parts(
    tape: &mut Tape,
    x: TensorId,
    params: &ClassicalHeadParams,
) -> Result<ClassicalHeadParts, AttentionError> {
    let d_h = tape.shape(x)[1];
    for (name, w) in [
        ("W_K", params.w_k),
        ("W_Q", params.w_q),
        ("W_V", params.w_v),
    ] {
        if tape.shape(w) != [d_h, d_h] {
            return Err(AttentionError::BadWeightShape {
                name,
                d_h,
                shape: tape.shape(w),
            });
        }
    }
    let keys = tape.matmul(x, params.w_k)?;
    let queries = tape.matmul(x, params.w_q)?;
    let values = tape.matmul(x, params.w_v)?;
    let queries_t = tape.transpose(queries);
    let logits = tape.matmul(keys, queries_t)?;
    let scaled = tape.scale(logits, 1.0 / (d_h as f64).sqrt());
    let attention = tape.softmax_rows(scaled)?;
    let output = tape.matmul(attention, values)?;
    Ok(ClassicalHeadParts { output, attention })
}

pub fn hybrid_head(
    tape: &mut Tape,
    x: TensorId,
    params: &HybridHeadParams,
    opts: &HybridOptions,
) -> Result<HybridHeadParts, AttentionError> {
    let d_h = tape.shape(x)[1];
    for (role, theta) in [
        (Role::Key, params.theta_k),
        (Role::Query, params.theta_q),
        (Role::Value, params.theta_v),
    ] {
        let expected = role.param_count(d_h);
        if tape.shape(theta) != [1, expected] {
            return Err(AttentionError::BadParamShape {
                role,
                expected,
                shape: tape.shape(theta),
            });
        }
    }

    let keys = tape.custom(
        &[x, params.theta_k],
        Arc::new(ScalarCircuitOp::new(Role::Key, d_h, opts)),
    )?;
    let queries = tape.custom(
        &[x, params.theta_q],
        Arc::new(ScalarCircuitOp::new(Role::Query, d_h, opts)),
    )?;
    let values = tape.custom(
        &[x, params.theta_v],
        Arc::new(ValueCircuitOp::new(d_h, opts)),
    )?;

    // A_ij = -(Q_i - K_j)^2 via an outer broadcast difference.
    let keys_row = tape.transpose(keys);
    let diff = tape.sub(queries, keys_row)?;
    let squared = tape.mul(diff, diff)?;
    let scores = tape.scale(squared, -1.0);

    let scaled = tape.scale(scores, 1.0 / (d_h as f64).sqrt());
    let attention = tape.softmax_rows(scaled)?;
    let output = tape.matmul(attention, values)?;
    Ok(HybridHeadParts {
        output,
        scores,
        attention,
        values,
    })
}

/// Column-split -> per-head map -> column-concatenate in head order.
/// `heads.len()` defines n_h; the token width must divide evenly.
pub fn multi_head(
    tape: &mut Tape,
    x: TensorId,
    heads: &[HeadParams],
    opts: &HybridOptions,
) -> Result<TensorId, AttentionError> {
    let [_, d_t] = tape.shape(x);
    let n_h = heads.len();
    if n_h == 0 || d_t % n_h != 0 {
        return Err(AttentionError::HeadSplit { d_t, n_h });
    }
    let d_h = d_t / n_h;
    let mut outputs = Vec::with_capacity(n_h);
    for (h, head) in heads.iter().enumerate() {
        let slice = tape.slice_cols(x, h * d_h, d_h)?;
        let out = match head {
            HeadParams::Classical(p) => classical_head(tape, slice, p)?,
            HeadParams::Hybrid(p) => hybrid_head(tape, slice, p, opts)?.output,
        };
        outputs.push(out);
    }
    Ok(tape.concat_cols(&outputs)?)
}

fn custom_err(e: QsimError) -> TensorError {
    TensorError::Custom {
        op: "circuit",
        reason: e.to_string(),
    }
}

/// K or Q column: one circuit evaluation per token, output [tokens, 1].
struct ScalarCircuitOp {
    circuit: Circuit,
    angle_scale: f64,
    backend: GradBackend,
}

impl ScalarCircuitOp {
    fn new(role: Role, d_h: usize, opts: &HybridOptions) -> Self {
        Self {
            circuit: Circuit::for_role(role, d_h),
            angle_scale: opts.angle_scale,
            backend: opts.backend,
        }
    }

    fn angles(&self, row: &[f64]) -> Vec<f64> {
        row.iter().map(|&v| v * self.angle_scale).collect()
    }
}

impl CustomGrad for ScalarCircuitOp {
    fn forward(&self, inputs: &[(&[f64], Shape)]) -> Result<(Vec<f64>, Shape), TensorError> {
        let (x, [tokens, d_h]) = inputs[0];
        let (theta, _) = inputs[1];
        let mut out = Vec::with_capacity(tokens);
        for i in 0..tokens {
            let angles = self.angles(&x[i * d_h..(i + 1) * d_h]);
            let state = self.circuit.run(&angles, theta).map_err(custom_err)?;
            out.push(state.expect_z(0).map_err(custom_err)?);
        }
        Ok((out, [tokens, 1]))
    }

    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        _out_values: &[f64],
        out_grad: &[f64],
    ) -> Vec<Vec<f64>> {
        let (x, [tokens, d_h]) = inputs[0];
        let (theta, _) = inputs[1];
        let mut d_x = vec![0.0; tokens * d_h];
        let mut d_theta = vec![0.0; theta.len()];
        let mut weights = vec![0.0; d_h];
        for i in 0..tokens {
            let g = out_grad[i];
            if g == 0.0 {
                continue;
            }
            let angles = self.angles(&x[i * d_h..(i + 1) * d_h]);
            weights[0] = g;
            let grads = vjp(&self.circuit, &angles, theta, &weights, self.backend)
                .expect("validated in forward");
            for (j, dv) in grads.d_x.iter().enumerate() {
                d_x[i * d_h + j] += dv * self.angle_scale;
            }
            for (j, dv) in grads.d_theta.iter().enumerate() {
                d_theta[j] += dv;
            }
        }
        vec![d_x, d_theta]
    }

    fn label(&self) -> &'static str {
        match self.circuit.role() {
            Role::Key => "key_circuit",
            Role::Query => "query_circuit",
            Role::Value => "value_circuit",
        }
    }
}

/// Value matrix: <Z_j> per qubit per token, output [tokens, d_h].
struct ValueCircuitOp {
    circuit: Circuit,
    angle_scale: f64,
    backend: GradBackend,
}

impl ValueCircuitOp {
    fn new(d_h: usize, opts: &HybridOptions) -> Self {
        Self {
            circuit: Circuit::for_role(Role::Value, d_h),
            angle_scale: opts.angle_scale,
            backend: opts.backend,
        }
    }
}

impl CustomGrad for ValueCircuitOp {
    fn forward(&self, inputs: &[(&[f64], Shape)]) -> Result<(Vec<f64>, Shape), TensorError> {
        let (x, [tokens, d_h]) = inputs[0];
        let (theta, _) = inputs[1];
        let mut out = Vec::with_capacity(tokens * d_h);
        for i in 0..tokens {
            let angles: Vec<f64> = x[i * d_h..(i + 1) * d_h]
                .iter()
                .map(|&v| v * self.angle_scale)
                .collect();
            let state = self.circuit.run(&angles, theta).map_err(custom_err)?;
            for j in 0..d_h {
                out.push(state.expect_z(j).map_err(custom_err)?);
            }
        }
        Ok((out, [tokens, d_h]))
    }

    fn backward(
        &self,
        inputs: &[(&[f64], Shape)],
        _out_values: &[f64],
        out_grad: &[f64],
    ) -> Vec<Vec<f64>> {
        let (x, [tokens, d_h]) = inputs[0];
        let (theta, _) = inputs[1];
        let mut d_x = vec![0.0; tokens * d_h];
        let mut d_theta = vec![0.0; theta.len()];
        for i in 0..tokens {
            let weights = &out_grad[i * d_h..(i + 1) * d_h];
            if weights.iter().all(|&w| w == 0.0) {
                continue;
            }
            let angles: Vec<f64> = x[i * d_h..(i + 1) * d_h]
                .iter()
                .map(|&v| v * self.angle_scale)
                .collect();
            let grads = vjp(&self.circuit, &angles, theta, weights, self.backend)
                .expect("validated in forward");
            for (j, dv) in grads.d_x.iter().enumerate() {
                d_x[i * d_h + j] += dv * self.angle_scale;
            }
            for (j, dv) in grads.d_theta.iter().enumerate() {
                d_theta[j] += dv;
            }
        }
        vec![d_x, d_theta]
    }

    fn label(&self) -> &'static str {
        "value_circuit"
    }
}
