//! Loss, optimizer, learning-rate schedule, fold assignment and the
//! training loop.

mod config;
mod folds;
mod gradprobe;
mod loss;
mod optim;
mod predict;
mod report;
mod schedule;
mod trainer;

pub use config::TrainConfig;
pub use folds::{organ_histogram, stratified_group_kfold, FoldAssignment};
pub use gradprobe::{default_probe_params, loss_gradients, probe_gradients, ParamGrads, ProbeResult};
pub use loss::{composite_loss, LossTerms};
pub use optim::Adam;
pub use predict::{predict_masks, submission_csv, SUBMISSION_HEADER};
pub use report::{best_per_fold, curve_charts, format_g, metrics_csv, parse_metrics_csv, EpochMetrics, METRICS_HEADER};
pub use schedule::cosine_annealing_lr;
pub use trainer::{
    cross_validate, evaluate, fold_seed, load_samples, train_fold, train_model, CvReport, Evaluation, FoldRun,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("numeric failure: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.into(),
            source,
        }
    }
}
