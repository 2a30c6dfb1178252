use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GenerativeError;
use crate::imagecore::Image;

pub const PHASES: usize = 2;

/// Two-phase checkerboard of `cell × cell` squares shifted by a seeded offset.
/// Phase `p` hides the cells whose indices satisfy `(cx + cy) % 2 == p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintMaskGrid {
    pub width: usize,
    pub height: usize,
    pub cell: usize,
    pub offset: (usize, usize),
    /// Per phase, `B(x)` with 0 on hidden pixels and 1 elsewhere.
    pub masks: Vec<Image>,
}

impl InpaintMaskGrid {
    pub fn phase_count(&self) -> usize {
        self.masks.len()
    }

    /// Phase that hides pixel `(x, y)`.
    pub fn phase_of(&self, x: usize, y: usize) -> usize {
        let cx = (x + self.offset.0) / self.cell;
        let cy = (y + self.offset.1) / self.cell;
        (cx + cy) % PHASES
    }

    pub fn is_hidden(&self, phase: usize, x: usize, y: usize) -> bool {
        self.phase_of(x, y) == phase
    }

    /// `image · B_phase`, broadcast over channels.
    pub fn apply(&self, phase: usize, image: &Image) -> Image {
        let (w, h, c) = image.shape();
        let mut data = image.data().to_vec();
        for y in 0..h {
            for x in 0..w {
                if self.is_hidden(phase, x, y) {
                    data[(y * w + x) * c..(y * w + x + 1) * c].fill(0.0);
                }
            }
        }
        Image::new(w, h, c, data).expect("masking keeps values in range")
    }
}

pub fn make_mask_grid(width: usize, height: usize, cell: usize, seed: u64) -> Result<InpaintMaskGrid, GenerativeError> {
    if cell == 0 || cell >= width.min(height) {
        return Err(GenerativeError::InvalidConfig(format!(
            "mask cell {cell} must be in 1..{} for a {width}x{height} image",
            width.min(height)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = (rng.random_range(0..cell), rng.random_range(0..cell));
    let mut grid = InpaintMaskGrid {
        width,
        height,
        cell,
        offset,
        masks: Vec::new(),
    };
    for p in 0..PHASES {
        let data = (0..width * height)
            .map(|i| {
                if grid.is_hidden(p, i % width, i / width) {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        grid.masks
            .push(Image::new(width, height, 1, data).expect("binary mask"));
    }
    Ok(grid)
}
