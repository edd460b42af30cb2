//! Exact statevector simulation of the data-loader and ansatz circuits.
//!
//! Qubit `q` maps to bit `q` of the basis-state index (qubit 0 is the least
//! significant bit). Rotation gates use the exp(-i theta P / 2) convention:
//!
//! RX(t) = [[cos(t/2), -i sin(t/2)], [-i sin(t/2), cos(t/2)]]
//! RY(t) = [[cos(t/2),   -sin(t/2)], [   sin(t/2), cos(t/2)]]
//! RZ(t) = diag(e^{-i t/2}, e^{+i t/2})
//!
//! Every circuit is a data loader (H then RX(x_j) per qubit) followed by a
//! role ansatz: RX/RY/RZ rotation layers (one parameter per qubit per
//! layer), a CNOT ring with control q and target (q+1) mod n in ascending q
//! (omitted for a single qubit), and for the key/query roles one trailing
//! RY on qubit 0. Key/query circuits therefore carry 3n+1 parameters and
//! value circuits 3n.

pub mod grad;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QsimError {
    #[error("load_data: expected {expected} angles for {qubits} qubits, got {got}")]
    WrongDataLength {
        expected: usize,
        qubits: usize,
        got: usize,
    },
    #[error("{role} ansatz: expected {expected} parameters, got {got}")]
    WrongParamCount {
        role: Role,
        expected: usize,
        got: usize,
    },
    #[error("qubit index {qubit} out of range for {num_qubits} qubits")]
    QubitOutOfRange { qubit: usize, num_qubits: usize },
    #[error("cnot control and target are both qubit {qubit}")]
    CnotSameQubit { qubit: usize },
}

/// Which trainable circuit a parameter vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Key,
    Query,
    Value,
}

impl Role {
    /// Declared trainable-parameter count for this role at `d_h` qubits.
    pub fn param_count(self, num_qubits: usize) -> usize {
        match self {
            Role::Key | Role::Query => 3 * num_qubits + 1,
            Role::Value => 3 * num_qubits,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Key => write!(f, "key"),
            Role::Query => write!(f, "query"),
            Role::Value => write!(f, "value"),
        }
    }
}

/// Where a gate angle comes from at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleSource {
    /// x[index] of the token row being loaded.
    Data { index: usize },
    /// theta[index] of the trainable parameter vector.
    Param { index: usize },
}

/// Rotation axis; doubles as the Pauli generator of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    H {
        qubit: usize,
    },
    Rot {
        axis: Axis,
        qubit: usize,
        angle: AngleSource,
    },
    Cnot {
        control: usize,
        target: usize,
    },
}

/// Gate list for one circuit role, with angles still symbolic.
#[derive(Debug, Clone)]
pub struct Circuit {
    num_qubits: usize,
    role: Role,
    gates: Vec<Gate>,
}

/// Pauli-Z observable on one qubit (identity elsewhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZObservable {
    pub qubit: usize,
}

/// 2^n complex amplitudes of an n-qubit register.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    num_qubits: usize,
    amps: Vec<Complex64>,
}

impl StateVector {
    /// |0...0> on `num_qubits` qubits.
    pub fn zero_state(num_qubits: usize) -> Self {
        assert!(num_qubits >= 1, "need at least one qubit");
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << num_qubits];
        amps[0] = Complex64::new(1.0, 0.0);
        Self { num_qubits, amps }
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    fn check_qubit(&self, qubit: usize) -> Result<(), QsimError> {
        if qubit >= self.num_qubits {
            Err(QsimError::QubitOutOfRange {
                qubit,
                num_qubits: self.num_qubits,
            })
        } else {
            Ok(())
        }
    }

    /// Apply a 2x2 matrix to one qubit.
    fn apply_single(&mut self, qubit: usize, u: [[Complex64; 2]; 2]) {
        let stride = 1 << qubit;
        let dim = self.amps.len();
        let mut base = 0;
        while base < dim {
            for i in base..base + stride {
                let a0 = self.amps[i];
                let a1 = self.amps[i + stride];
                self.amps[i] = u[0][0] * a0 + u[0][1] * a1;
                self.amps[i + stride] = u[1][0] * a0 + u[1][1] * a1;
            }
            base += stride << 1;
        }
    }

    pub fn apply_h(&mut self, qubit: usize) -> Result<(), QsimError> {
        self.check_qubit(qubit)?;
        let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        self.apply_single(qubit, [[s, s], [s, -s]]);
        Ok(())
    }

    pub fn apply_rotation(
        &mut self,
        axis: Axis,
        qubit: usize,
        angle: f64,
    ) -> Result<(), QsimError> {
        self.check_qubit(qubit)?;
        let half = angle / 2.0;
        let (c, s) = (half.cos(), half.sin());
        let u = match axis {
            Axis::X => [
                [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
                [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
            ],
            Axis::Y => [
                [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
            ],
            Axis::Z => [
                [Complex64::new(c, -s), Complex64::new(0.0, 0.0)],
                [Complex64::new(0.0, 0.0), Complex64::new(c, s)],
            ],
        };
        self.apply_single(qubit, u);
        Ok(())
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<(), QsimError> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(QsimError::CnotSameQubit { qubit: control });
        }
        let cbit = 1 << control;
        let tbit = 1 << target;
        for i in 0..self.amps.len() {
            if i & cbit != 0 && i & tbit == 0 {
                self.amps.swap(i, i | tbit);
            }
        }
        Ok(())
    }

    /// <Z_j>: sum over basis states of +/-|amp|^2, sign from bit j.
    pub fn expect_z(&self, qubit: usize) -> Result<f64, QsimError> {
        self.check_qubit(qubit)?;
        let bit = 1 << qubit;
        let mut e = 0.0;
        for (i, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            e += if i & bit == 0 { p } else { -p };
        }
        Ok(e)
    }

    /// Amplitudes as JSON `[[re, im], ...]`, for debug dumps.
    pub fn dump_json(&self) -> String {
        let pairs: Vec<[f64; 2]> = self.amps.iter().map(|a| [a.re, a.im]).collect();
        serde_json::to_string(&pairs).expect("amplitudes serialize")
    }
}

impl ZObservable {
    pub fn expectation(&self, state: &StateVector) -> Result<f64, QsimError> {
        state.expect_z(self.qubit)
    }
}

/// Loader gate sequence: per qubit j, H then RX bound to x[j].
fn loader_gates(num_qubits: usize) -> Vec<Gate> {
    let mut gates = Vec::with_capacity(2 * num_qubits);
    for q in 0..num_qubits {
        gates.push(Gate::H { qubit: q });
        gates.push(Gate::Rot {
            axis: Axis::X,
            qubit: q,
            angle: AngleSource::Data { index: q },
        });
    }
    gates
}

/// Ansatz gate sequence for a role; parameter indices run 0..param_count.
fn ansatz_gates(role: Role, num_qubits: usize) -> Vec<Gate> {
    let mut gates = Vec::new();
    let mut p = 0;
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        for q in 0..num_qubits {
            gates.push(Gate::Rot {
                axis,
                qubit: q,
                angle: AngleSource::Param { index: p },
            });
            p += 1;
        }
    }
    if num_qubits > 1 {
        for q in 0..num_qubits {
            gates.push(Gate::Cnot {
                control: q,
                target: (q + 1) % num_qubits,
            });
        }
    }
    if matches!(role, Role::Key | Role::Query) {
        gates.push(Gate::Rot {
            axis: Axis::Y,
            qubit: 0,
            angle: AngleSource::Param { index: p },
        });
    }
    gates
}

/// Encode a data row into the register: state = prod_j RX(x_j) H |0...0>.
pub fn load_data(x: &[f64]) -> Result<StateVector, QsimError> {
    let n = x.len();
    if n == 0 {
        return Err(QsimError::WrongDataLength {
            expected: 1,
            qubits: 1,
            got: 0,
        });
    }
    let mut state = StateVector::zero_state(n);
    apply_gates(&mut state, &loader_gates(n), x, &[])?;
    Ok(state)
}

/// Apply a role ansatz to an existing state.
pub fn apply_ansatz(
    mut state: StateVector,
    role: Role,
    theta: &[f64],
) -> Result<StateVector, QsimError> {
    let n = state.num_qubits();
    let expected = role.param_count(n);
    if theta.len() != expected {
        return Err(QsimError::WrongParamCount {
            role,
            expected,
            got: theta.len(),
        });
    }
    apply_gates(&mut state, &ansatz_gates(role, n), &[], theta)?;
    Ok(state)
}

fn apply_gates(
    state: &mut StateVector,
    gates: &[Gate],
    x: &[f64],
    theta: &[f64],
) -> Result<(), QsimError> {
    for gate in gates {
        match *gate {
            Gate::H { qubit } => state.apply_h(qubit)?,
            Gate::Rot { axis, qubit, angle } => {
                let value = match angle {
                    AngleSource::Data { index } => x[index],
                    AngleSource::Param { index } => theta[index],
                };
                state.apply_rotation(axis, qubit, value)?;
            }
            Gate::Cnot { control, target } => state.apply_cnot(control, target)?,
        }
    }
    Ok(())
}

impl Circuit {
    /// Full loader + ansatz circuit for a role at `num_qubits` qubits.
    pub fn for_role(role: Role, num_qubits: usize) -> Self {
        let mut gates = loader_gates(num_qubits);
        gates.extend(ansatz_gates(role, num_qubits));
        Self {
            num_qubits,
            role,
            gates,
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn num_params(&self) -> usize {
        self.role.param_count(self.num_qubits)
    }

    fn check_bindings(&self, x: &[f64], theta: &[f64]) -> Result<(), QsimError> {
        if x.len() != self.num_qubits {
            return Err(QsimError::WrongDataLength {
                expected: self.num_qubits,
                qubits: self.num_qubits,
                got: x.len(),
            });
        }
        if theta.len() != self.num_params() {
            return Err(QsimError::WrongParamCount {
                role: self.role,
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Evaluate the circuit from |0...0> with concrete bindings.
    pub fn run(&self, x: &[f64], theta: &[f64]) -> Result<StateVector, QsimError> {
        self.check_bindings(x, theta)?;
        let mut state = StateVector::zero_state(self.num_qubits);
        apply_gates(&mut state, &self.gates, x, theta)?;
        Ok(state)
    }

    /// <Z_qubit> after running the circuit.
    pub fn expectation(&self, x: &[f64], theta: &[f64], qubit: usize) -> Result<f64, QsimError> {
        self.run(x, theta)?.expect_z(qubit)
    }
}

/// K_i / Q_i style scalar: run the role circuit and measure <Z_0>.
pub fn head_scalar(role: Role, x: &[f64], theta: &[f64]) -> Result<f64, QsimError> {
    Circuit::for_role(role, x.len()).expectation(x, theta, 0)
}

/// Row of the value matrix: <Z_j> for every qubit j.
pub fn value_row(x: &[f64], theta: &[f64]) -> Result<Vec<f64>, QsimError> {
    let state = Circuit::for_role(Role::Value, x.len()).run(x, theta)?;
    (0..x.len()).map(|j| state.expect_z(j)).collect()
}
