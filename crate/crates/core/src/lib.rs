//! Pixel-embedding instance segmentation on directly optimized embedding
//! fields: differentiable single-object losses, positive-unlabeled
//! training, embedding clustering and segmentation metrics.

pub mod cli;
pub mod clustering;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod sampling;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_labels_for_mode, validate_pair, EmbeddingField, LabelImage, LossConfig, RngSeed,
    SoftMask, Supervision, BACKGROUND, FIRST_INSTANCE, UNLABELED,
};
