use std::path::PathBuf;

use refsim_core::eval::EvalError;
use refsim_core::generative::GenerativeError;
use refsim_core::imagecore::ImageError;
use refsim_core::membank::MembankError;
use refsim_core::segmenter::SegmenterError;
use refsim_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_MODEL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// A core error attributed to one input file.
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Error },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::MissingPath(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Io { .. } => EXIT_DATA,
            CliError::File { source, .. } | CliError::Core(source) => core_code(source),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}
core_from!(
    ImageError,
    refsim_core::nncore::NnError,
    GenerativeError,
    SegmenterError,
    MembankError,
    EvalError
);

fn image_code(e: &ImageError) -> u8 {
    match e {
        ImageError::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn generative_code(e: &GenerativeError) -> u8 {
    match e {
        GenerativeError::EmptyTrainset
        | GenerativeError::ShapeMismatch { .. }
        | GenerativeError::UnsupportedShape(_) => EXIT_DATA,
        GenerativeError::InvalidConfig(_) => EXIT_USAGE,
        GenerativeError::Image(e) => image_code(e),
        _ => EXIT_MODEL,
    }
}

fn segmenter_code(e: &SegmenterError) -> u8 {
    match e {
        SegmenterError::EmptyTrainset
        | SegmenterError::PairShape { .. }
        | SegmenterError::MissingClass(_)
        | SegmenterError::NoForeground
        | SegmenterError::UnsupportedShape(_)
        | SegmenterError::ShapeMismatch { .. } => EXIT_DATA,
        SegmenterError::InvalidConfig(_) => EXIT_USAGE,
        SegmenterError::Image(e) => image_code(e),
        _ => EXIT_MODEL,
    }
}

fn membank_code(e: &MembankError) -> u8 {
    match e {
        MembankError::EmptyRefs | MembankError::ShapeMismatch { .. } => EXIT_DATA,
        MembankError::InvalidTag(_) | MembankError::InvalidArgument(_) | MembankError::TooFewVectors { .. } => {
            EXIT_USAGE
        }
        _ => EXIT_MODEL,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::InvalidConfig(_) | EvalError::MissingPrerequisite(_) | EvalError::MissingPath(_) => EXIT_USAGE,
        EvalError::Image(e) => image_code(e),
        EvalError::Generative(e) => generative_code(e),
        EvalError::Segmenter(e) => segmenter_code(e),
        EvalError::Membank(e) => membank_code(e),
        _ => EXIT_DATA,
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Image(e) => image_code(e),
        Error::Nn(_) => EXIT_MODEL,
        Error::Generative(e) => generative_code(e),
        Error::Segmenter(e) => segmenter_code(e),
        Error::Membank(e) => membank_code(e),
        Error::Eval(e) => eval_code(e),
    }
}
