//! Network assembly: patching, linear embedding, class token, positional
//! table, encoder stacks, pooling, classifier, and exact parameter
//! accounting.
//!
//! The parameter layout is the single source of truth for initialization,
//! gradient flattening, checkpoints, and `count_params`: entries appear in
//! the order embedding (weight, bias), class token (class-token variant
//! only), then per encoder layer the per-head attention parameters
//! followed by the encoder MLP (w1, b1, w2, b2), then the classifier
//! (w1, b1, w2, b2). Values are row-major f64 in memory and little-endian
//! f32 in checkpoint files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    multi_head, AttentionError, ClassicalHeadParams, HeadParams, HybridHeadParams, HybridOptions,
};
use crate::qsim::grad::GradBackend;
use crate::qsim::Role;
use crate::tensor::{Shape, Tape, TensorError, TensorId};
use crate::trainer::{CurvePoint, MetricsReport};

/// Hidden width of the classifier MLP; fixed by the architecture.
pub const CLASSIFIER_HIDDEN: usize = 32;

/// Negative slope of the classifier LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },
    #[error("image is {got:?} but the config expects at least {expected:?}")]
    ImageTooSmall { expected: [usize; 2], got: Shape },
    #[error("parameter vector has {got} values, layout needs {expected}")]
    ParamSize { expected: usize, got: usize },
    #[error("bad checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the final token matrix is reduced before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Trainable first row, extracted after the encoder stack.
    #[serde(alias = "cls")]
    ClassToken,
    /// Per-column maximum (CMX).
    #[serde(alias = "cmx")]
    ColumnMax,
    /// Per-column mean (CMN).
    #[serde(alias = "cmn")]
    ColumnMean,
}

impl Variant {
    /// Short names used by the CLI and result tables.
    pub fn tag(self) -> &'static str {
        match self {
            Variant::ClassToken => "cls",
            Variant::ColumnMax => "cmx",
            Variant::ColumnMean => "cmn",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "cls" => Some(Variant::ClassToken),
            "cmx" => Some(Variant::ColumnMax),
            "cmn" => Some(Variant::ColumnMean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Classical,
    Hybrid,
}

impl EncoderKind {
    pub fn tag(self) -> &'static str {
        match self {
            EncoderKind::Classical => "classical",
            EncoderKind::Hybrid => "hybrid",
        }
    }
}

/// All architecture hyperparameters.
///
/// The defaults reproduce the published configuration: n_l=5, d_t=16,
/// n_t=16, n_h=4 (so d_h=4), d_ff=16, with a 16x32 central crop split
/// into a 4x4 grid of 4x8 patches, giving d_i=32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of tokens/patches.
    pub n_t: usize,
    /// Flattened patch length; must equal the per-patch crop area.
    pub d_i: usize,
    /// Token length after linear embedding.
    pub d_t: usize,
    /// Number of attention heads.
    pub n_h: usize,
    /// Hidden width of the encoder MLP.
    pub d_ff: usize,
    /// Number of encoder layers.
    pub n_l: usize,
    pub variant: Variant,
    pub encoder: EncoderKind,
    /// Add the fixed sinusoidal positional table after embedding.
    pub positional: bool,
    /// Central crop (rows, cols) taken from the input grid.
    pub crop: [usize; 2],
    /// Patch grid (rows, cols); rows*cols == n_t.
    pub patch_grid: [usize; 2],
    /// Multiplier from token entries to loader angles (hybrid only).
    pub angle_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_t: 16,
            d_i: 32,
            d_t: 16,
            n_h: 4,
            d_ff: 16,
            n_l: 5,
            variant: Variant::ColumnMax,
            encoder: EncoderKind::Classical,
            positional: true,
            crop: [16, 32],
            patch_grid: [4, 4],
            angle_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Data length per head, d_h = d_t / n_h.
    pub fn d_h(&self) -> usize {
        self.d_t / self.n_h
    }

    /// Token rows entering the encoder stack (class token adds one).
    pub fn token_rows(&self) -> usize {
        self.n_t + usize::from(self.variant == Variant::ClassToken)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.n_t == 0 || self.d_i == 0 || self.d_t == 0 || self.n_h == 0 || self.d_ff == 0 {
            return fail("all dimensions must be positive".into());
        }
        if self.n_l == 0 {
            return fail("need at least one encoder layer".into());
        }
        if !self.d_t.is_multiple_of(self.n_h) {
            return fail(format!(
                "d_t = {} not divisible by n_h = {}",
                self.d_t, self.n_h
            ));
        }
        let [gr, gc] = self.patch_grid;
        if gr * gc != self.n_t {
            return fail(format!(
                "patch grid {}x{} does not produce n_t = {} patches",
                gr, gc, self.n_t
            ));
        }
        let [cr, cc] = self.crop;
        if !cr.is_multiple_of(gr) || !cc.is_multiple_of(gc) {
            return fail(format!(
                "crop {}x{} not divisible into a {}x{} patch grid",
                cr, cc, gr, gc
            ));
        }
        if (cr / gr) * (cc / gc) != self.d_i {
            return fail(format!(
                "patch area {} does not match d_i = {}",
                (cr / gr) * (cc / gc),
                self.d_i
            ));
        }
        if !(self.angle_scale.is_finite() && self.angle_scale > 0.0) {
            return fail(format!("angle_scale {} must be positive", self.angle_scale));
        }
        Ok(())
    }
}

/// What distribution an entry is initialized from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); covers weights and biases.
    Weight { fan_in: usize },
    /// Zero-initialized trainable class-token row.
    ClassToken,
    /// Circuit angle, uniform(-pi, pi).
    Angle,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered description of every trainable tensor of a configuration.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamSpec>,
    pub total: usize,
}

/// Enumerate the trainable tensors in their documented order.
pub fn param_layout(config: &ModelConfig) -> Result<ParamLayout, ModelError> {
    config.validate()?;
    let d_h = config.d_h();
    let mut entries: Vec<ParamSpec> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Shape, kind: ParamKind| {
        let spec = ParamSpec {
            name,
            shape,
            offset,
            kind,
        };
        offset += spec.len();
        entries.push(spec);
    };

    push(
        "embed.w".into(),
        [config.d_i, config.d_t],
        ParamKind::Weight { fan_in: config.d_i },
    );
    push(
        "embed.b".into(),
        [1, config.d_t],
        ParamKind::Weight { fan_in: config.d_i },
    );
    if config.variant == Variant::ClassToken {
        push("class_token".into(), [1, config.d_t], ParamKind::ClassToken);
    }
    for layer in 0..config.n_l {
        for head in 0..config.n_h {
            match config.encoder {
                EncoderKind::Classical => {
                    for w in ["w_k", "w_q", "w_v"] {
                        push(
                            format!("layer{layer}.head{head}.{w}"),
                            [d_h, d_h],
                            ParamKind::Weight { fan_in: d_h },
                        );
                    }
                }
                EncoderKind::Hybrid => {
                    for (name, role) in [
                        ("theta_k", Role::Key),
                        ("theta_q", Role::Query),
                        ("theta_v", Role::Value),
                    ] {
                        push(
                            format!("layer{layer}.head{head}.{name}"),
                            [1, role.param_count(d_h)],
                            ParamKind::Angle,
                        );
                    }
                }
            }
        }
        push(
            format!("layer{layer}.mlp.w1"),
            [config.d_t, config.d_ff],
            ParamKind::Weight { fan_in: config.d_t },
        );
        push(
            format!("layer{layer}.mlp.b1"),
            [1, config.d_ff],
            ParamKind::Weight { fan_in: config.d_t },
        );
        push(
            format!("layer{layer}.mlp.w2"),
            [config.d_ff, config.d_t],
            ParamKind::Weight {
                fan_in: config.d_ff,
            },
        );
        push(
            format!("layer{layer}.mlp.b2"),
            [1, config.d_t],
            ParamKind::Weight {
                fan_in: config.d_ff,
            },
        );
    }
    push(
        "classifier.w1".into(),
        [config.d_t, CLASSIFIER_HIDDEN],
        ParamKind::Weight { fan_in: config.d_t },
    );
    push(
        "classifier.b1".into(),
        [1, CLASSIFIER_HIDDEN],
        ParamKind::Weight { fan_in: config.d_t },
    );
    push(
        "classifier.w2".into(),
        [CLASSIFIER_HIDDEN, 1],
        ParamKind::Weight {
            fan_in: CLASSIFIER_HIDDEN,
        },
    );
    push(
        "classifier.b2".into(),
        [1, 1],
        ParamKind::Weight {
            fan_in: CLASSIFIER_HIDDEN,
        },
    );

    Ok(ParamLayout {
        entries,
        total: offset,
    })
}

/// Total number of trainable scalars actually allocated for a config.
pub fn count_params(config: &ModelConfig) -> Result<usize, ModelError> {
    Ok(param_layout(config)?.total)
}

/// Flat trainable parameter vector in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
}

impl ModelParams {
    /// Seeded initialization: weights/biases uniform(+-1/sqrt(fan_in)),
    /// class token zeros, circuit angles uniform(-pi, pi).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let layout = param_layout(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.total);
        for spec in &layout.entries {
            match spec.kind {
                ParamKind::Weight { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    values.extend((0..spec.len()).map(|_| dist.sample(&mut rng)));
                }
                ParamKind::ClassToken => values.extend(std::iter::repeat_n(0.0, spec.len())),
                ParamKind::Angle => {
                    let dist = Uniform::new(-std::f64::consts::PI, std::f64::consts::PI);
                    values.extend((0..spec.len()).map(|_| dist.sample(&mut rng)));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self, ModelError> {
        let expected = count_params(config)?;
        if values.len() != expected {
            return Err(ModelError::ParamSize {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of one layout entry.
    pub fn entry<'a>(&'a self, spec: &ParamSpec) -> &'a [f64] {
        &self.values[spec.offset..spec.offset + spec.len()]
    }
}

/// Take the central `crop` window of a row-major grid.
pub fn central_crop(grid: &[f64], dims: Shape, crop: [usize; 2]) -> Result<Vec<f64>, ModelError> {
    let [rows, cols] = dims;
    if grid.len() != rows * cols {
        return Err(ModelError::InvalidConfig {
            reason: format!("grid length {} does not match {rows}x{cols}", grid.len()),
        });
    }
    if crop[0] > rows || crop[1] > cols {
        return Err(ModelError::ImageTooSmall {
            expected: crop,
            got: dims,
        });
    }
    let r0 = (rows - crop[0]) / 2;
    let c0 = (cols - crop[1]) / 2;
    let mut out = Vec::with_capacity(crop[0] * crop[1]);
    for r in r0..r0 + crop[0] {
        out.extend_from_slice(&grid[r * cols + c0..r * cols + c0 + crop[1]]);
    }
    Ok(out)
}

/// Split an image into a patch grid and flatten each patch row-major into
/// one row; patches are traversed row-major across the grid.
pub fn patch_and_flatten(
    image: &[f64],
    dims: Shape,
    patch_grid: [usize; 2],
) -> Result<Vec<f64>, ModelError> {
    let [rows, cols] = dims;
    if image.len() != rows * cols {
        return Err(ModelError::InvalidConfig {
            reason: format!("image length {} does not match {rows}x{cols}", image.len()),
        });
    }
    let [gr, gc] = patch_grid;
    if gr == 0 || gc == 0 || rows % gr != 0 || cols % gc != 0 {
        return Err(ModelError::InvalidConfig {
            reason: format!("{rows}x{cols} image not divisible into {gr}x{gc} patches"),
        });
    }
    let (pr, pc) = (rows / gr, cols / gc);
    let mut out = Vec::with_capacity(rows * cols);
    for tile_r in 0..gr {
        for tile_c in 0..gc {
            for r in 0..pr {
                let base = (tile_r * pr + r) * cols + tile_c * pc;
                out.extend_from_slice(&image[base..base + pc]);
            }
        }
    }
    Ok(out)
}

/// Crop + patch an input grid into the [n_t, d_i] token source matrix.
pub fn prepare_tokens(
    config: &ModelConfig,
    grid: &[f64],
    dims: Shape,
) -> Result<Vec<f64>, ModelError> {
    let cropped = central_crop(grid, dims, config.crop)?;
    patch_and_flatten(&cropped, config.crop, config.patch_grid)
}

/// Fixed sinusoidal positional table (frequency base 10000), row-major
/// [tokens, d_t]. Depends only on its arguments; row 0 is (0, 1, 0, 1, ...).
pub fn positional_embedding(tokens: usize, d_t: usize) -> Vec<f64> {
    let mut table = vec![0.0; tokens * d_t];
    for pos in 0..tokens {
        for i in 0..d_t {
            let pair = (i / 2) as f64;
            let freq = 10000f64.powf(-2.0 * pair / d_t as f64);
            let angle = pos as f64 * freq;
            table[pos * d_t + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Tape handles for one encoder MLP: Linear(d_t -> d_ff), GELU,
/// Linear(d_ff -> d_t).
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

fn mlp(tape: &mut Tape, x: TensorId, p: &MlpParams) -> Result<TensorId, ModelError> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, p.w2)?;
    Ok(tape.add(out, p.b2)?)
}

/// y = x + MHA(LN(x)); out = y + MLP(LN(y)).
pub fn classical_encoder_layer<F>(
    tape: &mut Tape,
    x: TensorId,
    mha: F,
    mlp_params: &MlpParams,
) -> Result<TensorId, ModelError>
where
    F: FnOnce(&mut Tape, TensorId) -> Result<TensorId, ModelError>,
{
    let normed = tape.layer_norm_rows(x)?;
    let attended = mha(tape, normed)?;
    let y = tape.add(x, attended)?;
    let normed2 = tape.layer_norm_rows(y)?;
    let ff = mlp(tape, normed2, mlp_params)?;
    Ok(tape.add(y, ff)?)
}

/// out = x + MLP(MHA(LN(x))): one normalization, one residual.
pub fn hybrid_encoder_layer<F>(
    tape: &mut Tape,
    x: TensorId,
    mha: F,
    mlp_params: &MlpParams,
) -> Result<TensorId, ModelError>
where
    F: FnOnce(&mut Tape, TensorId) -> Result<TensorId, ModelError>,
{
    let normed = tape.layer_norm_rows(x)?;
    let attended = mha(tape, normed)?;
    let ff = mlp(tape, attended, mlp_params)?;
    Ok(tape.add(x, ff)?)
}

/// A fully built forward pass for one sample.
pub struct ForwardGraph {
    pub tape: Tape,
    /// Classification probability, shape [1, 1].
    pub prob: TensorId,
    /// One leaf per layout entry, in layout order.
    pub leaves: Vec<TensorId>,
}

struct LeafCursor<'a> {
    layout: &'a ParamLayout,
    ids: &'a [TensorId],
    next: usize,
}

impl LeafCursor<'_> {
    fn take(&mut self, suffix: &str) -> TensorId {
        let spec = &self.layout.entries[self.next];
        debug_assert!(
            spec.name.ends_with(suffix),
            "layout order drifted: wanted *{suffix}, found {}",
            spec.name
        );
        let id = self.ids[self.next];
        self.next += 1;
        id
    }
}

/// Build the forward graph from a [n_t, d_i] token matrix to the output
/// probability. Leaves are registered in layout order before anything else.
pub fn build_forward(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[f64],
) -> Result<ForwardGraph, ModelError> {
    build_forward_with(config, params, tokens, GradBackend::default())
}

/// `build_forward` with an explicit circuit-gradient backend.
pub fn build_forward_with(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[f64],
    backend: GradBackend,
) -> Result<ForwardGraph, ModelError> {
    let layout = param_layout(config)?;
    if params.len() != layout.total {
        return Err(ModelError::ParamSize {
            expected: layout.total,
            got: params.len(),
        });
    }
    if tokens.len() != config.n_t * config.d_i {
        return Err(ModelError::InvalidConfig {
            reason: format!(
                "token matrix length {} does not match n_t*d_i = {}",
                tokens.len(),
                config.n_t * config.d_i
            ),
        });
    }

    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(layout.entries.len());
    for spec in &layout.entries {
        leaves.push(tape.leaf(params.entry(spec).to_vec(), spec.shape, true)?);
    }
    let mut cursor = LeafCursor {
        layout: &layout,
        ids: &leaves,
        next: 0,
    };

    let token_leaf = tape.constant(tokens.to_vec(), [config.n_t, config.d_i])?;

    let embed_w = cursor.take("embed.w");
    let embed_b = cursor.take("embed.b");
    let embedded = tape.matmul(token_leaf, embed_w)?;
    let mut x = tape.add(embedded, embed_b)?;

    if config.variant == Variant::ClassToken {
        let class_token = cursor.take("class_token");
        x = tape.concat_rows(class_token, x)?;
    }

    if config.positional {
        let rows = config.token_rows();
        let table = positional_embedding(rows, config.d_t);
        let pos = tape.constant(table, [rows, config.d_t])?;
        x = tape.add(x, pos)?;
    }

    let opts = HybridOptions {
        angle_scale: config.angle_scale,
        backend,
    };
    for _ in 0..config.n_l {
        let mut heads = Vec::with_capacity(config.n_h);
        for _ in 0..config.n_h {
            match config.encoder {
                EncoderKind::Classical => heads.push(HeadParams::Classical(ClassicalHeadParams {
                    w_k: cursor.take(".w_k"),
                    w_q: cursor.take(".w_q"),
                    w_v: cursor.take(".w_v"),
                })),
                EncoderKind::Hybrid => heads.push(HeadParams::Hybrid(HybridHeadParams {
                    theta_k: cursor.take(".theta_k"),
                    theta_q: cursor.take(".theta_q"),
                    theta_v: cursor.take(".theta_v"),
                })),
            }
        }
        let mlp_params = MlpParams {
            w1: cursor.take(".mlp.w1"),
            b1: cursor.take(".mlp.b1"),
            w2: cursor.take(".mlp.w2"),
            b2: cursor.take(".mlp.b2"),
        };
        let mha = |tape: &mut Tape, input: TensorId| -> Result<TensorId, ModelError> {
            Ok(multi_head(tape, input, &heads, &opts)?)
        };
        x = match config.encoder {
            EncoderKind::Classical => classical_encoder_layer(&mut tape, x, mha, &mlp_params)?,
            EncoderKind::Hybrid => hybrid_encoder_layer(&mut tape, x, mha, &mlp_params)?,
        };
    }

    let pooled = match config.variant {
        Variant::ClassToken => tape.row(x, 0)?,
        Variant::ColumnMax => tape.max_cols(x),
        Variant::ColumnMean => tape.mean_cols(x),
    };

    let w1 = cursor.take("classifier.w1");
    let b1 = cursor.take("classifier.b1");
    let w2 = cursor.take("classifier.w2");
    let b2 = cursor.take("classifier.b2");
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let logit = tape.matmul(h, w2)?;
    let logit = tape.add(logit, b2)?;
    let prob = tape.sigmoid(logit);

    debug_assert_eq!(cursor.next, layout.entries.len());
    Ok(ForwardGraph { tape, prob, leaves })
}

/// Forward probability for a raw input grid.
pub fn predict(
    config: &ModelConfig,
    params: &ModelParams,
    grid: &[f64],
    dims: Shape,
) -> Result<f64, ModelError> {
    let tokens = prepare_tokens(config, grid, dims)?;
    let graph = build_forward(config, params, &tokens)?;
    Ok(graph.tape.values(graph.prob)[0])
}

/// Forward + BCE loss + backward for one labelled sample; returns the
/// probability, the loss, and the flat parameter gradient in layout order.
pub fn loss_and_grad(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[f64],
    label: f64,
    backend: GradBackend,
) -> Result<(f64, f64, Vec<f64>), ModelError> {
    let ForwardGraph {
        mut tape,
        prob,
        leaves,
    } = build_forward_with(config, params, tokens, backend)?;
    let y = tape.constant(vec![label], [1, 1])?;
    let loss = tape.bce_loss(prob, y)?;
    tape.backward(loss)?;
    let mut grad = Vec::with_capacity(params.len());
    for &leaf in &leaves {
        grad.extend_from_slice(tape.grad(leaf).expect("leaf grad populated"));
    }
    Ok((tape.values(prob)[0], tape.values(loss)[0], grad))
}

/// Serialized model: parameters, configuration, and training metadata.
///
/// On disk: a u64 little-endian JSON byte length, the JSON header
/// (config, seed, epoch, split fractions, metrics, curves), then
/// `count_params(config)` little-endian f32 parameter values in layout
/// order. See docs/FORMATS.md.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub split_fractions: [f64; 3],
    #[serde(default)]
    pub metrics: BTreeMap<String, MetricsReport>,
    #[serde(default)]
    pub curves: Vec<CurvePoint>,
    #[serde(skip)]
    pub params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: Checkpoint,
}

const CHECKPOINT_FORMAT: &str = "qvit-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn model_params(&self) -> Result<ModelParams, ModelError> {
        ModelParams::from_values(&self.config, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let expected = count_params(&self.config)?;
        if self.params.len() != expected {
            return Err(ModelError::ParamSize {
                expected,
                got: self.params.len(),
            });
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            body: self.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&(json.len() as u64).to_le_bytes())?;
        file.write_all(&json)?;
        for &v in &self.params {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| ModelError::BadCheckpoint {
                reason: "file shorter than the header length prefix".into(),
            })?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        let mut json = vec![0u8; json_len];
        file.read_exact(&mut json)
            .map_err(|_| ModelError::BadCheckpoint {
                reason: format!("header truncated (expected {json_len} JSON bytes)"),
            })?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| ModelError::BadCheckpoint {
                reason: format!("header is not valid JSON: {e}"),
            })?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(ModelError::BadCheckpoint {
                reason: format!("unknown format tag {:?}", header.format),
            });
        }
        let mut body = header.body;
        let expected = count_params(&body.config)?;
        let mut params = Vec::with_capacity(expected);
        let mut buf = [0u8; 4];
        for i in 0..expected {
            file.read_exact(&mut buf)
                .map_err(|_| ModelError::BadCheckpoint {
                    reason: format!("parameter block truncated at value {i} of {expected}"),
                })?;
            params.push(f32::from_le_bytes(buf) as f64);
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(ModelError::BadCheckpoint {
                reason: "trailing bytes after parameter block".into(),
            });
        }
        body.params = params;
        Ok(body)
    }
}
