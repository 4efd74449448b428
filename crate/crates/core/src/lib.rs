//! Multi-path texture classifier: handcrafted GLCM/LBP features, two deep
//! backbones with bidirectional state-space token mixers, attention blocks,
//! and a cross-modal encoder followed by a recurrent fusion controller.
//!
//! Everything runs on the tape autodiff in `evmf_tensor`.

pub mod attention;
pub mod backbones;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod verify;
pub mod vim;
pub mod xai;

pub use config::RunConfig;
pub use error::{CoreError, Result};
pub use model::{build_variant, FusionMode, Model, ModelConfig, Sample, VARIANTS};
pub use train::{train, TrainConfig, TrainState};
