//! Joint training of translation and segmentation networks, and the baselines.

pub mod config;
pub mod data;
pub mod infer;
pub mod pool;
pub mod run;
pub mod step;

pub use config::{TrainConfig, TrainMode};
pub use infer::{
    checkpoint_mode, export_taps, predict_cases, predict_probs, segment, tap_grids, translate,
    uncrop, SegmentMode, Segmentation, TapSource,
};
pub use run::{
    train, train_baseline, train_on, validate, Corpus, EpochRecord, RunOptions, TrainOutput,
    TrainState,
};
pub use step::{Batch, Trainer};
