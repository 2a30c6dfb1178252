use crate::eval::EvalError;
use crate::generative::GenerativeError;
use crate::imagecore::ImageError;
use crate::membank::MembankError;
use crate::nncore::NnError;
use crate::segmenter::SegmenterError;

/// Crate-level error; each module keeps its own error enum.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Generative(#[from] GenerativeError),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Membank(#[from] MembankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
