use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{batch_tensor, decoder, encoder, unbatch, VaeHeads, INPAINTER_ARCH, VAE_ARCH};
use super::mask::{make_mask_grid, InpaintMaskGrid, PHASES};
use super::GenerativeError;
use crate::imagecore::Image;
use crate::nncore::{checkpoint_hash, ForwardCtx, ModelParams, NnError, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Inpaint,
    Vae,
}

impl GeneratorKind {
    pub fn architecture_id(self) -> &'static str {
        match self {
            GeneratorKind::Inpaint => INPAINTER_ARCH,
            GeneratorKind::Vae => VAE_ARCH,
        }
    }
}

/// Test-time use of the inpainter: one unmasked pass on the candidate, or one
/// pass per mask phase with hidden-region predictions stitched together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulateMode {
    #[default]
    Unmasked,
    MaskedStitch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedReference {
    pub image: Image,
    pub source: GeneratorKind,
    pub mode: SimulateMode,
    pub architecture_id: String,
    pub checkpoint_hash: String,
}

/// A trained generator ready for inference. Immutable; share across threads.
#[derive(Debug, Clone)]
pub struct Generator {
    params: ModelParams,
    kind: GeneratorKind,
    hash: String,
    shape: (usize, usize, usize),
    mode: SimulateMode,
    cell: usize,
    mask_seed: u64,
    latent: usize,
}

pub(crate) fn input_shape_of(params: &ModelParams) -> Result<(usize, usize, usize), GenerativeError> {
    let bad = || GenerativeError::InvalidModel("meta lacks input_shape [width, height, channels]".into());
    let arr = params
        .meta
        .info
        .get("input_shape")
        .and_then(|v| v.as_array())
        .ok_or_else(bad)?;
    let dims: Vec<usize> = arr.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect();
    match dims.as_slice() {
        [w, h, c] => Ok((*w, *h, *c)),
        _ => Err(bad()),
    }
}

impl Generator {
    pub fn new(params: ModelParams) -> Result<Self, GenerativeError> {
        let kind = match params.meta.architecture_id.as_str() {
            INPAINTER_ARCH => GeneratorKind::Inpaint,
            VAE_ARCH => GeneratorKind::Vae,
            other => {
                return Err(GenerativeError::ArchitectureMismatch {
                    expected: format!("{INPAINTER_ARCH} or {VAE_ARCH}"),
                    found: other.to_string(),
                })
            }
        };
        let shape = input_shape_of(&params)?;
        let mode = match params.meta.info_str("simulate_mode") {
            None | Some("unmasked") => SimulateMode::Unmasked,
            Some("masked-stitch") => SimulateMode::MaskedStitch,
            Some(m) => return Err(GenerativeError::InvalidModel(format!("unknown simulate_mode {m}"))),
        };
        let cell = params.meta.info.get("cell").and_then(|v| v.as_u64()).unwrap_or(8) as usize;
        let mask_seed = params.meta.info.get("mask_seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let latent = params.meta.info.get("latent_dim").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        if kind == GeneratorKind::Vae && latent == 0 {
            return Err(GenerativeError::InvalidModel("VAE meta lacks latent_dim".into()));
        }
        let hash = checkpoint_hash(&params);
        Ok(Self {
            params,
            kind,
            hash,
            shape,
            mode,
            cell,
            mask_seed,
            latent,
        })
    }

    /// As [`Generator::new`], additionally requiring `kind`.
    pub fn with_kind(params: ModelParams, kind: GeneratorKind) -> Result<Self, GenerativeError> {
        if params.meta.architecture_id != kind.architecture_id() {
            return Err(GenerativeError::ArchitectureMismatch {
                expected: kind.architecture_id().to_string(),
                found: params.meta.architecture_id.clone(),
            });
        }
        Self::new(params)
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.hash
    }

    /// `(width, height, channels)` the generator was trained on.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn mode(&self) -> SimulateMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: SimulateMode) {
        self.mode = mode;
    }

    /// The grid used by masked-stitch inference.
    pub fn stitch_grid(&self) -> Result<InpaintMaskGrid, GenerativeError> {
        make_mask_grid(self.shape.0, self.shape.1, self.cell, self.mask_seed)
    }

    fn check(&self, img: &Image) -> Result<(), GenerativeError> {
        if img.shape() != self.shape {
            return Err(GenerativeError::ShapeMismatch {
                expected: self.shape,
                found: img.shape(),
            });
        }
        Ok(())
    }

    /// Raw network outputs (clamped) for a batch of same-shape inputs.
    pub fn forward(&self, images: &[&Image]) -> Result<Vec<Image>, GenerativeError> {
        for img in images {
            self.check(img)?;
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (w, h, c) = self.shape;
        let mut ctx = ForwardCtx::new(&self.params, false);
        let x = ctx.input(&batch_tensor(images));
        let y = match self.kind {
            GeneratorKind::Inpaint => inpaint_forward(&mut ctx, c, x)?,
            GeneratorKind::Vae => {
                let heads = VaeHeads::new(w, h, self.latent);
                vae_forward(&mut ctx, &heads, c, x, None)?.recon
            }
        };
        Ok(unbatch(ctx.graph.value(y), images.len(), c, h, w))
    }

    /// Predictions for `grid.apply(p, img)` for each phase `p`.
    pub fn reconstruct_phases(&self, img: &Image, grid: &InpaintMaskGrid) -> Result<Vec<Image>, GenerativeError> {
        let masked: Vec<Image> = (0..PHASES).map(|p| grid.apply(p, img)).collect();
        self.forward(&masked.iter().collect::<Vec<_>>())
    }

    pub fn simulate(&self, candidate: &Image) -> Result<SimulatedReference, GenerativeError> {
        self.check(candidate)?;
        let image = match (self.kind, self.mode) {
            (GeneratorKind::Inpaint, SimulateMode::MaskedStitch) => {
                let grid = self.stitch_grid()?;
                let preds = self.reconstruct_phases(candidate, &grid)?;
                let (w, h, c) = self.shape;
                let mut data = vec![0.0; w * h * c];
                for y in 0..h {
                    for x in 0..w {
                        let p = grid.phase_of(x, y);
                        for ch in 0..c {
                            data[(y * w + x) * c + ch] = preds[p].get(x, y, ch);
                        }
                    }
                }
                Image::new(w, h, c, data)?
            }
            _ => self.forward(&[candidate])?.remove(0),
        };
        Ok(SimulatedReference {
            image,
            source: self.kind,
            mode: if self.kind == GeneratorKind::Vae {
                SimulateMode::Unmasked
            } else {
                self.mode
            },
            architecture_id: self.params.meta.architecture_id.clone(),
            checkpoint_hash: self.hash.clone(),
        })
    }

    /// Simulates every candidate, in parallel across images.
    pub fn simulate_many(&self, candidates: &[Image]) -> Result<Vec<SimulatedReference>, GenerativeError> {
        candidates.par_iter().map(|c| self.simulate(c)).collect()
    }
}

pub(crate) fn inpaint_forward(ctx: &mut ForwardCtx, channels: usize, x: Var) -> Result<Var, NnError> {
    let e = encoder(channels).forward(ctx, x)?;
    decoder(channels).forward(ctx, e)
}

pub(crate) struct VaeOutputs {
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// With `noise = Some(eps)` decodes `mu + exp(logvar / 2) · eps`; otherwise decodes `mu`.
pub(crate) fn vae_forward(
    ctx: &mut ForwardCtx,
    heads: &VaeHeads,
    channels: usize,
    x: Var,
    noise: Option<&Tensor>,
) -> Result<VaeOutputs, NnError> {
    let e = encoder(channels).forward(ctx, x)?;
    let (mu, logvar) = heads.encode(ctx, e)?;
    let z = match noise {
        Some(eps) => {
            let half = ctx.graph.scale(logvar, 0.5)?;
            let std = ctx.graph.exp(half)?;
            let eps = ctx.input(eps);
            let s = ctx.graph.mul(std, eps)?;
            ctx.graph.add(mu, s)?
        }
        None => mu,
    };
    let d = heads.expand(ctx, z)?;
    let recon = decoder(channels).forward(ctx, d)?;
    Ok(VaeOutputs { recon, mu, logvar })
}

/// `R̂ = CNN(I)` with the inpainter, in the mode recorded at training time.
pub fn simulate_reference_inpaint(
    params: &ModelParams,
    candidate: &Image,
) -> Result<SimulatedReference, GenerativeError> {
    Generator::with_kind(params.clone(), GeneratorKind::Inpaint)?.simulate(candidate)
}

/// Posterior-mean VAE reconstruction of `candidate`.
pub fn simulate_reference_vae(params: &ModelParams, candidate: &Image) -> Result<SimulatedReference, GenerativeError> {
    Generator::with_kind(params.clone(), GeneratorKind::Vae)?.simulate(candidate)
}
