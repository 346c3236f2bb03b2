//! Video captioning with a bidirectional LSTM encoder over per-frame
//! features and a soft-attention LSTM decoder, trained from scratch with
//! hand-derived gradients.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use data::{Dataset, FeatureMap, Vocabulary};
pub use encoder::{CellVariant, EncodedVideo, FrameFeatureSequence};
pub use error::{Error, Result};
pub use model::{GradientSet, ModelDims, ModelParams};
pub use numerics::{Matrix, Rng};
pub use training::{Checkpoint, TrainingConfig};
