//! Experiment orchestration: dataset splits, training loops, ensembling,
//! and the staged end-to-end runner that turns a config file into a
//! metrics report on disk.

use std::fmt;
use std::io;
use std::path::PathBuf;

use crate::augment::AugmentError;
use crate::eval::EvalError;
use crate::models::ModelError;
use crate::nn::NnError;
use crate::preprocess::PreprocessError;
use crate::volume::VolumeError;

mod ensemble;
mod experiment;
mod split;
mod train;

pub use ensemble::majority_vote;
pub use experiment::{
    assemble_sets, control_template, evaluate_predictions, labels_for_samples,
    normalize_cohort, preprocess_dataset, read_provenance, run_experiment, slice_normalized,
    ExperimentConfig, MetricsRow, PartitionSets, Report, RunProvenance, Task,
};
pub use split::{kfold, split_dataset, FoldPlan, SplitPlan};
pub use train::{predict, train, EpochStats, Hyperparams, Prediction, SampleSet, TrainHistory};

/// Anything that can go wrong between a config file and a finished report.
#[derive(Debug)]
pub enum PipelineError {
    /// A dataset manifest had no rows to work with.
    EmptyManifest,
    /// Split ratios must be positive and sum to 1.
    InvalidRatios { sum: f64 },
    /// Fewer distinct subjects than requested folds.
    TooFewSubjects { subjects: usize, k: usize },
    /// Training loss left the reals; the run is unrecoverable.
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    /// Predictions that were supposed to describe the same samples don't.
    SampleMismatch(String),
    /// The experiment config is self-contradictory.
    InvalidConfig(String),
    /// A run directory is missing the files a finished run would have.
    NotARunDirectory(PathBuf),
    /// Failure inside a named pipeline stage.
    Stage {
        stage: &'static str,
        source: Box<PipelineError>,
    },
    Volume(VolumeError),
    Preprocess(PreprocessError),
    Augment(AugmentError),
    Model(ModelError),
    Engine(NnError),
    Eval(EvalError),
    Encode(serde_json::Error),
    IoFailure(io::Error),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::EmptyManifest => write!(f, "dataset manifest has no entries"),
            PipelineError::InvalidRatios { sum } => {
                write!(f, "split ratios must sum to 1, got {sum}")
            }
            PipelineError::TooFewSubjects { subjects, k } => {
                write!(f, "{subjects} subjects cannot fill {k} folds")
            }
            PipelineError::NonFiniteLoss {
                epoch,
                batch,
                value,
            } => write!(
                f,
                "loss became non-finite ({value}) at epoch {epoch}, batch {batch}"
            ),
            PipelineError::SampleMismatch(detail) => write!(f, "sample mismatch: {detail}"),
            PipelineError::InvalidConfig(detail) => write!(f, "invalid config: {detail}"),
            PipelineError::NotARunDirectory(path) => {
                write!(f, "{} is not a run directory", path.display())
            }
            PipelineError::Stage { stage, source } => write!(f, "stage {stage}: {source}"),
            PipelineError::Volume(e) => write!(f, "volume: {e}"),
            PipelineError::Preprocess(e) => write!(f, "preprocess: {e}"),
            PipelineError::Augment(e) => write!(f, "augment: {e}"),
            PipelineError::Model(e) => write!(f, "model: {e}"),
            PipelineError::Engine(e) => write!(f, "nn: {e}"),
            PipelineError::Eval(e) => write!(f, "eval: {e}"),
            PipelineError::Encode(e) => write!(f, "encode: {e}"),
            PipelineError::IoFailure(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PipelineError::Stage { source, .. } => Some(source.as_ref()),
            PipelineError::Volume(e) => Some(e),
            PipelineError::Preprocess(e) => Some(e),
            PipelineError::Augment(e) => Some(e),
            PipelineError::Model(e) => Some(e),
            PipelineError::Engine(e) => Some(e),
            PipelineError::Eval(e) => Some(e),
            PipelineError::Encode(e) => Some(e),
            PipelineError::IoFailure(e) => Some(e),
            _ => None,
        }
    }
}

impl From<VolumeError> for PipelineError {
    fn from(e: VolumeError) -> Self {
        PipelineError::Volume(e)
    }
}

impl From<PreprocessError> for PipelineError {
    fn from(e: PreprocessError) -> Self {
        PipelineError::Preprocess(e)
    }
}

impl From<AugmentError> for PipelineError {
    fn from(e: AugmentError) -> Self {
        PipelineError::Augment(e)
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        PipelineError::Model(e)
    }
}

impl From<NnError> for PipelineError {
    fn from(e: NnError) -> Self {
        PipelineError::Engine(e)
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Eval(e)
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Encode(e)
    }
}

impl From<io::Error> for PipelineError {
    fn from(e: io::Error) -> Self {
        PipelineError::IoFailure(e)
    }
}

/// Tags an error with the pipeline stage it escaped from.
fn staged<T>(stage: &'static str, result: Result<T, PipelineError>) -> Result<T, PipelineError> {
    result.map_err(|e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    })
}
