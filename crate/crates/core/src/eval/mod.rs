//! Datasets, detection metrics and end-to-end experiments.

mod dataset;
mod experiment;
mod metrics;
mod report;


use std::path::PathBuf;

pub use dataset::{
    load_dataset, load_mvtec, make_synthetic_dataset, save_dataset, Dataset, MvtecOptions, Polarity, SyntheticConfig,
    TestItem,
};
pub use experiment::{
    bank_split, run_experiment, ClassicConfig, ExperimentConfig, ImportedFeatures, MembankConfig, Pipeline,
    Prerequisites, RefMode, SupervisedConfig,
};
pub use metrics::{capture_rate, f_score, filter_rate, Confusion, Label};
pub use report::{write_report, Aggregates, EvalReport, ItemRow};

use crate::generative::GenerativeError;
use crate::imagecore::ImageError;
use crate::membank::MembankError;
use crate::segmenter::SegmenterError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{decisions} decisions for {labels} labels")]
    LengthMismatch { decisions: usize, labels: usize },
    #[error("capture rate undefined: no defective items")]
    NoDefectiveItems,
    #[error("filter rate undefined: no nominal items")]
    NoNominalItems,
    #[error("f-score undefined: zero denominator {0}")]
    DegenerateFScore(&'static str),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("no nominal training images under {0}")]
    EmptyTrain(PathBuf),
    #[error("no ground-truth mask for {stem} (expected {path})")]
    MissingMask { stem: String, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Generative(#[from] GenerativeError),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Membank(#[from] MembankError),
}
