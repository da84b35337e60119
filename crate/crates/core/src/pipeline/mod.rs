//! From keypoint files to trained models and classification reports.

pub mod metrics;
pub mod preprocess;
pub mod synthetic;
pub mod train;

pub use metrics::{compute_metrics, ClassMetrics, ClassificationReport};
pub use preprocess::{
    fill_missing, resample_indices, to_input_tensor, Dataset, MissingPolicy, PreprocessConfig, ResamplePolicy,
};
pub use train::{
    evaluate, predict_dataset, top_k, train, write_epoch_log, EpochRecord, Precision, TrainConfig, Trainer,
};
