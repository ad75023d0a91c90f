//! Training, evaluation and persistence.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{parse_kv, LrSchedule, TrainConfig};
pub use eval::{evaluate, predict_video, score_video, Evaluation, VideoPrediction};
pub use optim::{Adam, AdamState};
pub use train::{split_dataset, train, EpochStats, Split, TrainOutcome, TrainStatus, Trainer};
