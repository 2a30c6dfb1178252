//! Image representation, PNG I/O, translation registration, synthetic
//! defects and textures, and the difference-image detector.

mod defect;
mod image;
mod io;
mod postprocess;
mod register;
pub mod texture;

pub use defect::{inject_defect, DefectShape, DefectSpec};
pub use image::{abs_diff, DiffMap, Image};
pub use io::{load_image, save_image, save_mask_png, write_blobs_json, BitDepth};
pub use postprocess::{
    disc_offsets, gaussian_blur, label_components, open_binary, postprocess, Blob, DetectionMask, PostprocessConfig,
};
pub use register::{register_translation, shift_replicate, Registration};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported image format in {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("corrupt image data in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("channel count must be 1 or 3, got {0}")]
    Channels(usize),
    #[error("image dimensions must be nonzero")]
    Empty,
    #[error("data length {actual} does not match shape (expected {expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("intensity {0} outside [0, 1] or not finite")]
    OutOfRange(f64),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("defect footprint out of bounds: {0}")]
    OutOfBounds(String),
}
