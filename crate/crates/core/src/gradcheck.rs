//! Central finite-difference checking for tape-built functions.
//!
//! This is the independent oracle used throughout the test suites: it
//! re-evaluates a freshly built graph at shifted leaf values and never
//! touches the reverse-mode path it is checking.

use crate::tensor::{Tape, TensorError, TensorId};

/// Graph builder contract: given a fresh tape and one value buffer per
/// leaf slot, create the leaves (in slot order), build the graph, and
/// return the scalar loss id plus the leaf ids.
pub type GraphBuilder<'a> =
    &'a dyn Fn(&mut Tape, &[Vec<f64>]) -> Result<(TensorId, Vec<TensorId>), TensorError>;

/// Relative error with an absolute floor, |a-b| / max(|a|, |b|, floor).
/// The floor keeps comparisons meaningful when both sides are ~0, where a
/// finite difference cannot resolve anything anyway.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval(build: GraphBuilder, leaves: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = build(&mut tape, leaves).expect("graph builds");
    assert_eq!(tape.shape(loss), [1, 1], "gradcheck needs a scalar output");
    tape.values(loss)[0]
}

/// Central-difference gradient of the loss with respect to leaf slot
/// `target`, step `eps`.
pub fn numerical_grad(
    build: GraphBuilder,
    leaves: &[Vec<f64>],
    target: usize,
    eps: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; leaves[target].len()];
    for i in 0..grad.len() {
        let mut plus = leaves.to_vec();
        let mut minus = leaves.to_vec();
        plus[target][i] += eps;
        minus[target][i] -= eps;
        grad[i] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * eps);
    }
    grad
}

/// Reverse-mode gradients for every leaf slot, from a single backward pass.
pub fn backward_grads(build: GraphBuilder, leaves: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let (loss, ids) = build(&mut tape, leaves).expect("graph builds");
    tape.backward(loss).expect("backward succeeds");
    ids.iter()
        .map(|&id| tape.grad(id).expect("leaf grad populated").to_vec())
        .collect()
}

/// Assert reverse-mode and finite-difference gradients agree on every slot.
///
/// Panics with a descriptive message at the first offending entry.
pub fn assert_grads_match(
    build: GraphBuilder,
    leaves: &[Vec<f64>],
    eps: f64,
    tol: f64,
    floor: f64,
) {
    let analytic = backward_grads(build, leaves);
    for (slot, slot_grads) in analytic.iter().enumerate() {
        let numeric = numerical_grad(build, leaves, slot, eps);
        for (i, (a, n)) in slot_grads.iter().zip(&numeric).enumerate() {
            let err = rel_err(*a, *n, floor);
            assert!(
                err <= tol,
                "slot {slot} entry {i}: backward {a} vs finite-difference {n} (rel err {err:.3e} > {tol:.1e})"
            );
        }
    }
}
