//! Patch feature grids from the generator encoder, and the feature-grid file
//! used to import externally computed grids.
//!
//! Feature-grid file (all integers little-endian):
//!
//! ```text
//! "RSFG" | version u16 | dtype u8 | dim u32 | count u32
//! count × ( name_len u32 | name | image_w u32 | image_h u32 | gh u32 | gw u32 | gh·gw·dim values )
//! crc32 u32 over every preceding byte
//! ```
//!
//! dtype 0 is f32, dtype 1 is f64; vectors are row-major over the grid.
//! Cell `(gx, gy)` of an imported grid covers the pixel tile
//! `[gx·W/gw, (gx+1)·W/gw)` × `[gy·H/gh, (gy+1)·H/gh)`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::{finish_crc, verify_crc, Reader};
use super::MembankError;
use crate::generative::{
    batch_tensor, encoder, encoder_channels, encoder_stop, input_shape_of, INPAINTER_ARCH, VAE_ARCH,
};
use crate::imagecore::Image;
use crate::nncore::{checkpoint_hash, ForwardCtx, ModelParams};

pub const FEATURE_GRID_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RSFG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub gh: usize,
    pub gw: usize,
    pub dim: usize,
    /// `gh · gw · dim` values, cell-major in row order.
    pub vectors: Vec<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl FeatureGrid {
    pub fn new(
        gh: usize,
        gw: usize,
        dim: usize,
        vectors: Vec<f64>,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self, MembankError> {
        if gh == 0 || gw == 0 || dim == 0 {
            return Err(MembankError::InvalidArgument(
                "feature grid dims must be nonzero".into(),
            ));
        }
        if gw > image_width || gh > image_height {
            return Err(MembankError::InvalidArgument(format!(
                "{gw}x{gh} grid is finer than its {image_width}x{image_height} image"
            )));
        }
        if vectors.len() != gh * gw * dim {
            return Err(MembankError::InvalidArgument(format!(
                "feature grid has {} values, expected {}",
                vectors.len(),
                gh * gw * dim
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(MembankError::InvalidArgument(
                "feature grid has non-finite values".into(),
            ));
        }
        Ok(Self {
            gh,
            gw,
            dim,
            vectors,
            image_width,
            image_height,
        })
    }

    pub fn cells(&self) -> usize {
        self.gh * self.gw
    }

    pub fn vector(&self, cell: usize) -> &[f64] {
        &self.vectors[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Inclusive source-pixel bbox `[x0, y0, x1, y1]` of `cell`.
    pub fn receptive(&self, cell: usize) -> [usize; 4] {
        let (gx, gy) = (cell % self.gw, cell / self.gw);
        [
            gx * self.image_width / self.gw,
            gy * self.image_height / self.gh,
            (gx + 1) * self.image_width / self.gw - 1,
            (gy + 1) * self.image_height / self.gh - 1,
        ]
    }

    /// Pixel-space center `(x, y)` of `cell`'s receptive bbox.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.receptive(cell);
        ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0)
    }
}

/// Encoder checkpoint plus the tapped stage.
#[derive(Debug, Clone)]
pub struct Backbone {
    params: ModelParams,
    tag: String,
    stop: String,
    shape: (usize, usize, usize),
    hash: String,
}

impl Backbone {
    /// Accepts inpainter or VAE checkpoints; both share the encoder.
    pub fn new(params: ModelParams, layer_tag: &str) -> Result<Self, MembankError> {
        let arch = params.meta.architecture_id.as_str();
        if arch != INPAINTER_ARCH && arch != VAE_ARCH {
            return Err(MembankError::Backbone(format!(
                "architecture {arch} has no generator encoder"
            )));
        }
        let stop = encoder_stop(layer_tag).ok_or_else(|| MembankError::InvalidTag(layer_tag.to_string()))?;
        let shape = input_shape_of(&params).map_err(|e| MembankError::Backbone(e.to_string()))?;
        let hash = checkpoint_hash(&params);
        Ok(Self {
            params,
            tag: layer_tag.to_string(),
            stop,
            shape,
            hash,
        })
    }

    pub fn layer_tag(&self) -> &str {
        &self.tag
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.hash
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn dim(&self) -> usize {
        encoder_channels(&self.tag).expect("tag validated at construction")
    }

    /// Feature grid of one image.
    pub fn extract(&self, image: &Image) -> Result<FeatureGrid, MembankError> {
        if image.shape() != self.shape {
            return Err(MembankError::ShapeMismatch {
                expected: self.shape,
                found: image.shape(),
            });
        }
        let mut ctx = ForwardCtx::new(&self.params, false);
        let x = ctx.input(&batch_tensor(&[image]));
        let (y, reached) = encoder(self.shape.2).forward_until(&mut ctx, x, Some(&self.stop))?;
        debug_assert!(reached);
        let s = ctx.graph.shape(y).to_vec();
        let (c, gh, gw) = (s[1], s[2], s[3]);
        let pooled = neighborhood_mean(ctx.graph.value(y), c, gh, gw);
        FeatureGrid::new(gh, gw, c, pooled, image.width(), image.height())
    }

    /// Feature grids of many images, in parallel.
    pub fn extract_many(&self, images: &[Image]) -> Result<Vec<FeatureGrid>, MembankError> {
        images.par_iter().map(|i| self.extract(i)).collect()
    }
}

/// 3×3 average over the in-bounds neighbors of each cell, from a planar
/// `[C, gh, gw]` activation to cell-major vectors.
fn neighborhood_mean(act: &[f64], c: usize, gh: usize, gw: usize) -> Vec<f64> {
    let mut out = vec![0.0; gh * gw * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let cell = gy * gw + gx;
            let mut count = 0.0;
            for ny in gy.saturating_sub(1)..(gy + 2).min(gh) {
                for nx in gx.saturating_sub(1)..(gx + 2).min(gw) {
                    count += 1.0;
                    for ch in 0..c {
                        out[cell * c + ch] += act[(ch * gh + ny) * gw + nx];
                    }
                }
            }
            for v in &mut out[cell * c..(cell + 1) * c] {
                *v /= count;
            }
        }
    }
    out
}

/// Feature grid of `image` at encoder stage `layer_tag`.
pub fn extract_features(backbone: &ModelParams, image: &Image, layer_tag: &str) -> Result<FeatureGrid, MembankError> {
    Backbone::new(backbone.clone(), layer_tag)?.extract(image)
}

/// A named grid read from a feature-grid file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedGrid {
    pub name: String,
    pub grid: FeatureGrid,
}

pub fn encode_feature_grids(grids: &[NamedGrid]) -> Result<Vec<u8>, MembankError> {
    let dim = grids.first().map(|g| g.grid.dim).unwrap_or(0);
    if let Some(bad) = grids.iter().find(|g| g.grid.dim != dim) {
        return Err(MembankError::DimMismatch {
            expected: dim,
            found: bad.grid.dim,
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FEATURE_GRID_VERSION.to_le_bytes());
    out.push(1);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(grids.len() as u32).to_le_bytes());
    for g in grids {
        out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        for v in [g.grid.image_width, g.grid.image_height, g.grid.gh, g.grid.gw] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &g.grid.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    finish_crc(&mut out);
    Ok(out)
}

pub fn decode_feature_grids(bytes: &[u8]) -> Result<Vec<NamedGrid>, MembankError> {
    let body = verify_crc(bytes, MAGIC, FEATURE_GRID_VERSION, parse_grids)?;
    parse_grids(body)
}

fn parse_grids(body: &[u8]) -> Result<Vec<NamedGrid>, MembankError> {
    let mut r = Reader::new(body);
    let dtype = r.u8()?;
    if dtype > 1 {
        return Err(MembankError::Format(format!("unknown dtype tag {dtype}")));
    }
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut grids = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let iw = r.u32()? as usize;
        let ih = r.u32()? as usize;
        let gh = r.u32()? as usize;
        let gw = r.u32()? as usize;
        let n = gh
            .checked_mul(gw)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| MembankError::Format(format!("grid {name} is too large")))?;
        let vectors = if dtype == 0 { r.f32s(n)? } else { r.f64s(n)? };
        let grid = FeatureGrid::new(gh, gw, dim, vectors, iw, ih)
            .map_err(|e| MembankError::Format(format!("grid {name}: {e}")))?;
        grids.push(NamedGrid { name, grid });
    }
    r.finish()?;
    Ok(grids)
}

pub fn save_feature_grids(path: &Path, grids: &[NamedGrid]) -> Result<(), MembankError> {
    let bytes = encode_feature_grids(grids)?;
    std::fs::write(path, bytes).map_err(|source| MembankError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_feature_grids(path: &Path) -> Result<Vec<NamedGrid>, MembankError> {
    let bytes = std::fs::read(path).map_err(|source| MembankError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_feature_grids(&bytes)
}
