//! Bias-corrected ADAM over a flat parameter vector.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("adam_step: expected {expected} values, got params={params}, grads={grads}")]
    SizeMismatch {
        expected: usize,
        params: usize,
        grads: usize,
    },
}

/// ADAM hyperparameters. Defaults are the standard ones; the learning rate
/// has no default and must come from the training configuration.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected ADAM update, in place:
///
/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamParams,
) -> Result<(), OptimError> {
    let n = state.m.len();
    if params.len() != n || grads.len() != n {
        return Err(OptimError::SizeMismatch {
            expected: n,
            params: params.len(),
            grads: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    Ok(())
}
