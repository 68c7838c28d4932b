//! A Compact Convolutional Transformer trained from scratch on 28×28 RGB
//! blood-cell images, with its own reverse-mode autograd engine.
//!
//! Layering, bottom up: [`tensor`] and [`autograd`] (dense arrays and the
//! tape), [`nn`] and [`model`] (blocks and the assembled network),
//! [`loss`], [`optim`], [`train`] and [`checkpoint`] (the training recipe),
//! [`data`] (NPZ ingest and batching) and [`metrics`] (evaluation reports).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{CctConfig, ConfigError};
pub use data::{load_npz, DataError, DatasetBundle, Split, CLASS_NAMES};
pub use error::{Error, TensorError};
pub use metrics::{EvalReport, MetricsError};
pub use model::ModelParams;
pub use tensor::Tensor;
pub use train::{train, EpochRow, TrainError, TrainLog, TrainOptions, TrainOutcome};
