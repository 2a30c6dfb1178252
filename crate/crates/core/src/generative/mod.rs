//! Reference simulation: an inpainting encoder/decoder trained on masked
//! nominal images and a diagonal-Gaussian VAE, both producing `R̂` from a
//! candidate image.

mod arch;
mod mask;
mod simulate;
mod train;

pub use arch::{
    encoder, encoder_channels, encoder_stop, encoder_stride, ENCODER_CHANNELS, ENCODER_STRIDE, INPAINTER_ARCH, VAE_ARCH,
};
pub use mask::{make_mask_grid, InpaintMaskGrid, PHASES};
pub use simulate::{
    simulate_reference_inpaint, simulate_reference_vae, Generator, GeneratorKind, SimulateMode, SimulatedReference,
};
pub use train::{train_inpainter, train_vae, InpaintConfig, LossRegion, TrainReport, VaeConfig};

pub(crate) use arch::batch_tensor;
pub(crate) use simulate::input_shape_of;

use crate::imagecore::ImageError;
use crate::nncore::NnError;

#[derive(Debug, thiserror::Error)]
pub enum GenerativeError {
    #[error("trainset is empty")]
    EmptyTrainset,
    #[error("image shape {found:?} does not match expected {expected:?} (width, height, channels)")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("unsupported input shape: {0}")]
    UnsupportedShape(String),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Nn(#[from] NnError),
}
