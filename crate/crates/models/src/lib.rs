//! RainGaugeNet, its baselines, and the training and evaluation protocol.

pub mod error;
pub mod layers;
pub mod model;
pub mod nets;
pub mod preprocess;
pub mod train;

pub use error::{ModelError, Result};
pub use layers::Mode;
pub use model::{Arch, Model};
pub use nets::{RainGaugeNet, RainGaugeNetConfig, N_CLASSES};
pub use preprocess::{make_single_snapshot_input, Normalizer};
pub use train::{evaluate, train, AccuracyTable, EpochMetrics, TrainRecipe};
