//! Training loop, metric computation, best-model selection, and curve
//! emission.
//!
//! One optimizer step consumes one batch; the last partial batch is kept.
//! Per-sample forward/backward runs in parallel, but gradients are always
//! reduced in sample order, so identical (seed, config, data) give
//! bitwise-identical parameters whether or not `deterministic` is set;
//! the flag is recorded in checkpoints and manifests for provenance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DataFormat, EventRecord};
use crate::model::{
    count_params, prepare_tokens, Checkpoint, ModelConfig, ModelError, ModelParams,
};
use crate::qsim::grad::GradBackend;
use crate::tensor::optim::{adam_step, AdamParams, AdamState, OptimError};
use crate::tensor::BCE_CLAMP;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training aborted at epoch {epoch}, step {step}: loss became NaN")]
    Diverged {
        epoch: usize,
        step: usize,
        /// Parameters at the point of failure, for post-mortem inspection.
        checkpoint: Box<Checkpoint>,
    },
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("split contains only one class; AUC is undefined")]
    SingleClass,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimization protocol. Defaults are the published ones: 40 epochs,
/// batch size 512, ADAM at 5e-3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Recorded in checkpoints/manifests. Execution is deterministic
    /// either way (ordered gradient reduction).
    pub deterministic: bool,
    /// Gradient backend for hybrid circuit nodes.
    pub backend: GradBackend,
    /// Dataset split fractions, logged in every checkpoint.
    pub split_fractions: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 512,
            learning_rate: 5e-3,
            seed: 0,
            deterministic: true,
            backend: GradBackend::default(),
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Model(ModelError::InvalidConfig {
                reason: "batch_size must be positive".into(),
            }));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Model(ModelError::InvalidConfig {
                reason: format!("learning_rate {} must be positive", self.learning_rate),
            }));
        }
        Ok(())
    }
}

/// Accuracy / BCE / AUC on one named split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub accuracy: f64,
    pub bce: f64,
    pub auc: f64,
}

/// One curve row: (epoch, split) -> (loss, accuracy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Training inputs; validation drives best-model selection.
pub struct TrainData<'a> {
    pub train: &'a [EventRecord],
    pub val: &'a [EventRecord],
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest validation accuracy
    /// (ties resolved to the earliest epoch), with curves and validation
    /// metrics embedded.
    pub checkpoint: Checkpoint,
    pub curves: Vec<CurvePoint>,
    /// Total optimizer steps taken; one per batch.
    pub steps: u64,
}

fn clamped_bce(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

fn predicted_label(p: f64) -> f64 {
    if p > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// ADAM over mean-batch BCE. Records train/val loss and accuracy after
/// every epoch and returns the best-validation-accuracy checkpoint.
pub fn train(
    model_cfg: &ModelConfig,
    init: Option<ModelParams>,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit { split: "train" });
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit { split: "val" });
    }

    let train_tokens = tokenize(model_cfg, data.train)?;
    let val_tokens = tokenize(model_cfg, data.val)?;
    let train_labels: Vec<f64> = data.train.iter().map(|r| r.label.as_f64()).collect();
    let val_labels: Vec<f64> = data.val.iter().map(|r| r.label.as_f64()).collect();

    let mut params = match init {
        Some(p) => {
            if p.len() != count_params(model_cfg)? {
                return Err(TrainError::Model(ModelError::ParamSize {
                    expected: count_params(model_cfg)?,
                    got: p.len(),
                }));
            }
            p
        }
        None => ModelParams::init(model_cfg, cfg.seed)?,
    };
    let mut adam = AdamState::new(params.len());
    let hyper = AdamParams::with_learning_rate(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_f42d_4c95_7f2d);

    let mut curves: Vec<CurvePoint> = Vec::with_capacity(2 * cfg.epochs);
    // With zero epochs the initialization is the selected model.
    let mut best: (f64, usize, Vec<f64>) = (f64::NEG_INFINITY, 0, params.values().to_vec());

    let mut order: Vec<usize> = (0..train_tokens.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<(f64, f64, Vec<f64>)>, ModelError> = batch
                .par_iter()
                .map(|&i| {
                    crate::model::loss_and_grad(
                        model_cfg,
                        &params,
                        &train_tokens[i],
                        train_labels[i],
                        cfg.backend,
                    )
                })
                .collect();
            let results = match results {
                Ok(r) => r,
                // NaNs reaching softmax surface as propagation errors
                // before the loss itself can go NaN; both are divergence.
                Err(e) if is_non_finite(&e) => {
                    let checkpoint = snapshot(model_cfg, cfg, epoch, params.values().to_vec());
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        checkpoint: Box::new(checkpoint),
                    });
                }
                Err(e) => return Err(e.into()),
            };

            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (i, (prob, loss, sample_grad)) in results.iter().enumerate() {
                batch_loss += loss;
                if predicted_label(*prob) == train_labels[batch[i]] {
                    epoch_correct += 1;
                }
                for (g, s) in grad.iter_mut().zip(sample_grad) {
                    *g += s;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= scale;
            }
            batch_loss *= scale;
            epoch_loss += batch_loss * batch.len() as f64;

            if batch_loss.is_nan() {
                let checkpoint = snapshot(model_cfg, cfg, epoch, params.values().to_vec());
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    checkpoint: Box::new(checkpoint),
                });
            }
            adam_step(params.values_mut(), &grad, &mut adam, &hyper)?;
        }
        let train_loss = epoch_loss / train_tokens.len() as f64;
        let train_acc = epoch_correct as f64 / train_tokens.len() as f64;

        let val_scores = forward_scores(model_cfg, &params, &val_tokens)?;
        let (val_loss, val_acc) = loss_and_accuracy(&val_scores, &val_labels);

        curves.push(CurvePoint {
            epoch,
            split: "train".into(),
            loss: train_loss,
            accuracy: train_acc,
        });
        curves.push(CurvePoint {
            epoch,
            split: "val".into(),
            loss: val_loss,
            accuracy: val_acc,
        });

        if val_acc > best.0 {
            best = (val_acc, epoch, params.values().to_vec());
        }
    }

    let steps = adam.step_count();
    let (_, best_epoch, best_values) = best;
    let mut checkpoint = snapshot(model_cfg, cfg, best_epoch, best_values);
    checkpoint.curves = curves.clone();
    let best_params = ModelParams::from_values(model_cfg, checkpoint.params.clone())?;
    if !data.val.is_empty() {
        let report = evaluate(model_cfg, &best_params, data.val, "val")?;
        checkpoint.metrics.insert("val".into(), report);
    }
    Ok(TrainOutcome {
        checkpoint,
        curves,
        steps,
    })
}

fn is_non_finite(err: &ModelError) -> bool {
    use crate::attention::AttentionError;
    use crate::tensor::TensorError;
    matches!(err, ModelError::Tensor(TensorError::NonFinite { .. }))
        || matches!(
            err,
            ModelError::Attention(AttentionError::Tensor(TensorError::NonFinite { .. }))
        )
}

fn snapshot(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    epoch: usize,
    params: Vec<f64>,
) -> Checkpoint {
    Checkpoint {
        config: model_cfg.clone(),
        seed: cfg.seed,
        epoch,
        split_fractions: cfg.split_fractions,
        metrics: BTreeMap::new(),
        curves: Vec::new(),
        params,
    }
}

fn tokenize(config: &ModelConfig, records: &[EventRecord]) -> Result<Vec<Vec<f64>>, TrainError> {
    records
        .iter()
        .map(|r| {
            prepare_tokens(
                config,
                &r.energy_f64(),
                [crate::data::GRID, crate::data::GRID],
            )
            .map_err(TrainError::from)
        })
        .collect()
}

fn forward_scores(
    config: &ModelConfig,
    params: &ModelParams,
    tokens: &[Vec<f64>],
) -> Result<Vec<f64>, TrainError> {
    let scores: Result<Vec<f64>, ModelError> = tokens
        .par_iter()
        .map(|t| {
            let graph = crate::model::build_forward(config, params, t)?;
            Ok(graph.tape.values(graph.prob)[0])
        })
        .collect();
    Ok(scores?)
}

fn loss_and_accuracy(scores: &[f64], labels: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let loss = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| clamped_bce(p, y))
        .sum::<f64>()
        / n;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| predicted_label(p) == y)
        .count();
    (loss, correct as f64 / n)
}

/// Accuracy at threshold 0.5, mean clamped BCE, and rank-statistic AUC on
/// a split.
pub fn evaluate(
    config: &ModelConfig,
    params: &ModelParams,
    records: &[EventRecord],
    split: &str,
) -> Result<MetricsReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptySplit { split: "evaluate" });
    }
    let tokens = tokenize(config, records)?;
    let scores = forward_scores(config, params, &tokens)?;
    let labels: Vec<f64> = records.iter().map(|r| r.label.as_f64()).collect();
    metrics_from_scores(&scores, &labels, split)
}

/// Evaluate a stored checkpoint on a split.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    records: &[EventRecord],
    split: &str,
) -> Result<MetricsReport, TrainError> {
    let params = checkpoint.model_params()?;
    evaluate(&checkpoint.config, &params, records, split)
}

/// Metrics for precomputed scores; used directly by the degenerate
/// constant-predictor checks.
pub fn metrics_from_scores(
    scores: &[f64],
    labels: &[f64],
    split: &str,
) -> Result<MetricsReport, TrainError> {
    if scores.is_empty() {
        return Err(TrainError::EmptySplit { split: "evaluate" });
    }
    let (bce, accuracy) = loss_and_accuracy(scores, labels);
    let auc = auc_rank(scores, labels).ok_or(TrainError::SingleClass)?;
    Ok(MetricsReport {
        split: split.to_string(),
        accuracy,
        bce,
        auc,
    })
}

/// AUC as the Mann-Whitney rank statistic with average ranks over ties,
/// which equals the pairwise P(positive outranks negative) with
/// half-credit for ties. `None` when either class is absent.
pub fn auc_rank(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// CSV with the fixed header `epoch,split,loss,accuracy`, one row per
/// (epoch, split).
pub fn export_curves(curves: &[CurvePoint], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for p in curves {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.epoch, p.split, p.loss, p.accuracy
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Inverse of [`export_curves`].
pub fn parse_curves(path: &Path) -> Result<Vec<CurvePoint>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "epoch,split,loss,accuracy" {
        return Err(TrainError::Data(DataError::Schema {
            reason: format!("bad curve header {header:?}"),
        }));
    }
    let mut curves = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(TrainError::Data(DataError::Schema {
                reason: format!("curve line {} has {} fields", lineno + 2, parts.len()),
            }));
        }
        let parse_f = |s: &str| -> Result<f64, TrainError> {
            s.parse().map_err(|_| {
                TrainError::Data(DataError::Schema {
                    reason: format!("bad number {s:?} on curve line {}", lineno + 2),
                })
            })
        };
        curves.push(CurvePoint {
            epoch: parts[0].parse().map_err(|_| {
                TrainError::Data(DataError::Schema {
                    reason: format!("bad epoch {:?} on curve line {}", parts[0], lineno + 2),
                })
            })?,
            split: parts[1].to_string(),
            loss: parse_f(parts[2])?,
            accuracy: parse_f(parts[3])?,
        });
    }
    Ok(curves)
}

/// Everything needed to re-run a training bit-identically: configs, data
/// file path and content hash, and the gradient backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_path: String,
    pub data_format: DataFormat,
    /// SHA-256 of the raw data file bytes.
    pub data_sha256: String,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            TrainError::Data(DataError::Schema {
                reason: format!("bad manifest: {e}"),
            })
        })
    }
}
