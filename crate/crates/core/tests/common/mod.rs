//! Shared test support: independent oracles and small fixtures.
//!
//! Everything here deliberately re-derives results through a different
//! code path than the library (dense matrix products instead of in-place
//! gate application, straight-line loops instead of the tape).

#![allow(dead_code)]

use qvit_core::model::{EncoderKind, ModelConfig, Variant};

pub mod oracle {
    //! Dense 2^n x 2^n unitary-product oracle for the circuit simulator.

    use num_complex::Complex64;
    use qvit_core::qsim::{AngleSource, Axis, Circuit, Gate};

    type C = Complex64;
    pub type Matrix = Vec<Vec<C>>;

    fn c(re: f64, im: f64) -> C {
        C::new(re, im)
    }

    pub fn identity(dim: usize) -> Matrix {
        let mut m = vec![vec![c(0.0, 0.0); dim]; dim];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = c(1.0, 0.0);
        }
        m
    }

    /// Hadamard, written out separately from the simulator.
    pub fn h_gate() -> Matrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![vec![c(s, 0.0), c(s, 0.0)], vec![c(s, 0.0), c(-s, 0.0)]]
    }

    /// exp(-i angle P / 2) for P in {X, Y, Z}.
    pub fn rot_gate(axis: Axis, angle: f64) -> Matrix {
        let half = angle / 2.0;
        let (ch, sh) = (half.cos(), half.sin());
        match axis {
            Axis::X => vec![vec![c(ch, 0.0), c(0.0, -sh)], vec![c(0.0, -sh), c(ch, 0.0)]],
            Axis::Y => vec![vec![c(ch, 0.0), c(-sh, 0.0)], vec![c(sh, 0.0), c(ch, 0.0)]],
            Axis::Z => vec![vec![c(ch, -sh), c(0.0, 0.0)], vec![c(0.0, 0.0), c(ch, sh)]],
        }
    }

    pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let n = a.len();
        let m = b[0].len();
        let k = b.len();
        let mut out = vec![vec![c(0.0, 0.0); m]; n];
        for i in 0..n {
            for p in 0..k {
                let av = a[i][p];
                for j in 0..m {
                    out[i][j] += av * b[p][j];
                }
            }
        }
        out
    }

    /// Embed a 2x2 gate on qubit `q` (LSB convention) into the full space:
    /// kron over factors with the most significant qubit leftmost.
    pub fn embed_single(u: &Matrix, q: usize, num_qubits: usize) -> Matrix {
        let mut full = vec![vec![c(1.0, 0.0)]];
        for factor in (0..num_qubits).rev() {
            let gate = if factor == q { u.clone() } else { identity(2) };
            full = kron(&full, &gate);
        }
        full
    }

    pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
        let (ar, ac) = (a.len(), a[0].len());
        let (br, bc) = (b.len(), b[0].len());
        let mut out = vec![vec![c(0.0, 0.0); ac * bc]; ar * br];
        for i in 0..ar {
            for j in 0..ac {
                for k in 0..br {
                    for l in 0..bc {
                        out[i * br + k][j * bc + l] = a[i][j] * b[k][l];
                    }
                }
            }
        }
        out
    }

    /// CNOT as an explicit basis permutation matrix.
    #[allow(clippy::needless_range_loop)]
    pub fn cnot_gate(control: usize, target: usize, num_qubits: usize) -> Matrix {
        let dim = 1 << num_qubits;
        let mut m = vec![vec![c(0.0, 0.0); dim]; dim];
        for b in 0..dim {
            let out = if b & (1 << control) != 0 {
                b ^ (1 << target)
            } else {
                b
            };
            m[out][b] = c(1.0, 0.0);
        }
        m
    }

    /// Product of the circuit's gates as one dense unitary.
    pub fn circuit_unitary(circuit: &Circuit, x: &[f64], theta: &[f64]) -> Matrix {
        let n = circuit.num_qubits();
        let mut total = identity(1 << n);
        for gate in circuit.gates() {
            let full = match *gate {
                Gate::H { qubit } => embed_single(&h_gate(), qubit, n),
                Gate::Rot { axis, qubit, angle } => {
                    let value = match angle {
                        AngleSource::Data { index } => x[index],
                        AngleSource::Param { index } => theta[index],
                    };
                    embed_single(&rot_gate(axis, value), qubit, n)
                }
                Gate::Cnot { control, target } => cnot_gate(control, target, n),
            };
            total = matmul(&full, &total);
        }
        total
    }

    /// Column 0 of the unitary: the state it produces from |0...0>.
    pub fn state_from_zero(u: &Matrix) -> Vec<C> {
        u.iter().map(|row| row[0]).collect()
    }

    /// <Z_j> computed directly from dense amplitudes.
    pub fn expect_z_dense(state: &[C], qubit: usize) -> f64 {
        state
            .iter()
            .enumerate()
            .map(|(b, a)| {
                let sign = if b & (1 << qubit) == 0 { 1.0 } else { -1.0 };
                sign * a.norm_sqr()
            })
            .sum()
    }
}

/// Small deterministic pseudo-random stream for test data.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    pub fn vec(&mut self, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| self.uniform(lo, hi)).collect()
    }
}

/// 4-token, 2-head, 2-layer configuration over 4x4 images.
pub fn tiny_config(encoder: EncoderKind, variant: Variant) -> ModelConfig {
    ModelConfig {
        n_t: 4,
        d_i: 4,
        d_t: 8,
        n_h: 2,
        d_ff: 8,
        n_l: 2,
        encoder,
        variant,
        positional: true,
        crop: [4, 4],
        patch_grid: [2, 2],
        angle_scale: 1.0,
    }
}

pub mod straightline {
    //! Loop-level reimplementation of the classical forward pass, used as
    //! the model-level oracle. No tape, no shared code with the library's
    //! forward path beyond the parameter layout contract.

    use qvit_core::model::{ModelConfig, ModelParams, ParamLayout, Variant};

    pub fn erf_cdf(x: f64) -> f64 {
        0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    pub fn layer_norm(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        out
    }

    pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..cols {
                out[r * cols + c] = exps[c] / sum;
            }
        }
        out
    }

    pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }

    /// SoftMax((xWk)(xWq)^T / sqrt(d_h)) (xWv) with explicit loops.
    pub fn classical_head(
        x: &[f64],
        tokens: usize,
        d_h: usize,
        w_k: &[f64],
        w_q: &[f64],
        w_v: &[f64],
    ) -> Vec<f64> {
        let keys = matmul(x, w_k, tokens, d_h, d_h);
        let queries = matmul(x, w_q, tokens, d_h, d_h);
        let values = matmul(x, w_v, tokens, d_h, d_h);
        let q_t = transpose(&queries, tokens, d_h);
        let mut logits = matmul(&keys, &q_t, tokens, d_h, tokens);
        let scale = 1.0 / (d_h as f64).sqrt();
        for v in &mut logits {
            *v *= scale;
        }
        let attn = softmax_rows(&logits, tokens, tokens);
        matmul(&attn, &values, tokens, tokens, d_h)
    }

    struct Slot<'a> {
        layout: &'a ParamLayout,
        params: &'a ModelParams,
        next: usize,
    }

    impl<'a> Slot<'a> {
        fn take(&mut self, suffix: &str) -> &'a [f64] {
            let spec = &self.layout.entries[self.next];
            assert!(spec.name.ends_with(suffix), "oracle drift at {}", spec.name);
            self.next += 1;
            self.params.entry(spec)
        }
    }

    /// Full classical forward pass over a prepared token matrix.
    pub fn classical_forward(
        cfg: &ModelConfig,
        layout: &ParamLayout,
        params: &ModelParams,
        tokens: &[f64],
    ) -> f64 {
        assert!(matches!(
            cfg.encoder,
            qvit_core::model::EncoderKind::Classical
        ));
        let mut slot = Slot {
            layout,
            params,
            next: 0,
        };
        let d_t = cfg.d_t;
        let embed_w = slot.take("embed.w");
        let embed_b = slot.take("embed.b");
        let mut x = matmul(tokens, embed_w, cfg.n_t, cfg.d_i, d_t);
        for r in 0..cfg.n_t {
            for c in 0..d_t {
                x[r * d_t + c] += embed_b[c];
            }
        }
        let mut rows = cfg.n_t;
        if cfg.variant == Variant::ClassToken {
            let ct = slot.take("class_token");
            let mut with_ct = ct.to_vec();
            with_ct.extend_from_slice(&x);
            x = with_ct;
            rows += 1;
        }
        if cfg.positional {
            let table = qvit_core::model::positional_embedding(rows, d_t);
            for (xi, ti) in x.iter_mut().zip(&table) {
                *xi += ti;
            }
        }
        let d_h = cfg.d_h();
        for _ in 0..cfg.n_l {
            let normed = layer_norm(&x, rows, d_t);
            // Multi-head attention over column slices.
            let mut attended = vec![0.0; rows * d_t];
            let mut head_weights = Vec::new();
            for _ in 0..cfg.n_h {
                let w_k = slot.take(".w_k").to_vec();
                let w_q = slot.take(".w_q").to_vec();
                let w_v = slot.take(".w_v").to_vec();
                head_weights.push((w_k, w_q, w_v));
            }
            for (h, (w_k, w_q, w_v)) in head_weights.iter().enumerate() {
                let mut slice = vec![0.0; rows * d_h];
                for r in 0..rows {
                    slice[r * d_h..(r + 1) * d_h]
                        .copy_from_slice(&normed[r * d_t + h * d_h..r * d_t + (h + 1) * d_h]);
                }
                let head_out = classical_head(&slice, rows, d_h, w_k, w_q, w_v);
                for r in 0..rows {
                    attended[r * d_t + h * d_h..r * d_t + (h + 1) * d_h]
                        .copy_from_slice(&head_out[r * d_h..(r + 1) * d_h]);
                }
            }
            let y: Vec<f64> = x.iter().zip(&attended).map(|(a, b)| a + b).collect();
            let normed2 = layer_norm(&y, rows, d_t);
            let w1 = slot.take(".mlp.w1");
            let b1 = slot.take(".mlp.b1");
            let w2 = slot.take(".mlp.w2");
            let b2 = slot.take(".mlp.b2");
            let mut hidden = matmul(&normed2, w1, rows, d_t, cfg.d_ff);
            for r in 0..rows {
                for c in 0..cfg.d_ff {
                    hidden[r * cfg.d_ff + c] += b1[c];
                    let v = hidden[r * cfg.d_ff + c];
                    hidden[r * cfg.d_ff + c] = v * erf_cdf(v);
                }
            }
            let mut ff = matmul(&hidden, w2, rows, cfg.d_ff, d_t);
            for r in 0..rows {
                for c in 0..d_t {
                    ff[r * d_t + c] += b2[c];
                }
            }
            x = y.iter().zip(&ff).map(|(a, b)| a + b).collect();
        }

        let pooled: Vec<f64> = match cfg.variant {
            Variant::ClassToken => x[..d_t].to_vec(),
            Variant::ColumnMax => (0..d_t)
                .map(|c| {
                    (0..rows)
                        .map(|r| x[r * d_t + c])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect(),
            Variant::ColumnMean => (0..d_t)
                .map(|c| (0..rows).map(|r| x[r * d_t + c]).sum::<f64>() / rows as f64)
                .collect(),
        };

        let w1 = slot.take("classifier.w1");
        let b1 = slot.take("classifier.b1");
        let w2 = slot.take("classifier.w2");
        let b2 = slot.take("classifier.b2");
        let hidden_width = qvit_core::model::CLASSIFIER_HIDDEN;
        let mut hidden = matmul(&pooled, w1, 1, d_t, hidden_width);
        for (h, b) in hidden.iter_mut().zip(b1) {
            *h += b;
            if *h <= 0.0 {
                *h *= qvit_core::model::LEAKY_SLOPE;
            }
        }
        let logit = matmul(&hidden, w2, 1, hidden_width, 1)[0] + b2[0];
        1.0 / (1.0 + (-logit).exp())
    }
}
