//! Hybrid quantum-classical vision transformer for calorimeter shower
//! classification, with a matched classical baseline.
//!
//! The crate is organized around the pipeline:
//!
//! - [`tensor`]: dense 2-D tensors with reverse-mode autodiff and ADAM
//! - [`qsim`]: exact statevector simulation of the key/query/value circuits
//!   with parameter-shift and adjoint gradients
//! - [`attention`]: classical and hybrid multi-head attention
//! - [`model`]: patching, embedding, encoder stacks, parameter counting,
//!   checkpoints
//! - [`data`]: event records, normalization, synthetic shower generation,
//!   dataset splits, portable and HDF5 file formats
//! - [`trainer`]: training loop, metrics (accuracy / BCE / AUC), curves

pub mod attention;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod qsim;
pub mod tensor;
pub mod trainer;

pub use model::{Checkpoint, EncoderKind, ModelConfig, ModelParams, Variant};
pub use qsim::grad::GradBackend;
pub use tensor::{Tape, TensorId};
pub use trainer::{MetricsReport, TrainConfig};
