//! Representation-based anomaly detection: patch feature grids, memory banks
//! of nominal features (from real or simulated references), greedy coreset
//! reduction, and nearest-neighbor anomaly maps.

mod bank;
mod codec;
mod features;
mod knn;
mod score;

pub use bank::{
    build_bank, coreset_size, coreset_subsample, decode_bank, encode_bank, load_bank, save_bank, BackboneMeta, Coreset,
    MemoryBank, Provenance, BANK_VERSION,
};
pub use features::{
    decode_feature_grids, encode_feature_grids, extract_features, load_feature_grids, save_feature_grids, Backbone,
    FeatureGrid, NamedGrid, FEATURE_GRID_VERSION,
};
pub use knn::{knn_brute_force, knn_exact, squared_distance, Neighbor};
pub use score::{
    classify, nominal_threshold, score, score_grid, upsample_grid, AnomalyResult, DEFAULT_K, MAP_SIGMA,
    THRESHOLD_MARGIN,
};

use std::path::PathBuf;

use crate::nncore::NnError;

#[derive(Debug, thiserror::Error)]
pub enum MembankError {
    #[error("no reference images given")]
    EmptyRefs,
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("unknown layer tag {0:?}; expected enc1..enc4")]
    InvalidTag(String),
    #[error("image shape {found:?} does not match backbone input {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("feature dim {found} does not match {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("k = {k} but the searched bank has {size} vectors")]
    TooFewVectors { k: usize, size: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unusable backbone: {0}")]
    Backbone(String),
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[cfg(test)]
mod tests;
