//! Synthetic data, training, evaluation and the pieces behind the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod plot;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::Config;
pub use dataset::{gen_dataset, Dataset, DatasetConfig, Pair, Variant};
pub use eval::{capture_radius, capture_radius_study, dice, evaluate_dice, FixedTranslationNet, LandscapeRow};
pub use model::{Model, ModelConfig, ModelKind};
pub use train::{train, LogRow, TrainSchedule};
