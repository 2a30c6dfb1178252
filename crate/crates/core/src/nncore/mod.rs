//! Minimal dense reverse-mode autodiff: a tape of nodes owned by a
//! [`Graph`], the layer set the toy networks need, Adam, finite-difference
//! gradient checking, and the binary checkpoint format.

mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    checkpoint_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BatchStats, ConvOptions, Graph, NormMode, PaddingMode, Var};
pub use layers::{kaiming_uniform, ForwardCtx, LayerSpec, Sequential};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Bound, ModelMeta, ModelParams};
pub use tensor::Tensor;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("builder is not deterministic: repeated forward gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint version {found} not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
