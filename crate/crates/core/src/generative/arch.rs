use crate::imagecore::Image;
use crate::nncore::{ForwardCtx, LayerSpec, NnError, Sequential, Tensor, Var};

use super::GenerativeError;

pub const INPAINTER_ARCH: &str = "refsim-inpainter-ed4-v1";
pub const VAE_ARCH: &str = "refsim-vae-ed4-v1";

pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Total downsampling factor of the encoder.
pub const ENCODER_STRIDE: usize = 16;

/// Four stride-2 conv + relu stages. The stage `enc{i}` output is tapped by the
/// feature extractor as layer tag `enc{i}`.
pub fn encoder(in_channels: usize) -> Sequential {
    let mut net = Sequential::new();
    let mut c = in_channels;
    for (i, co) in ENCODER_CHANNELS.iter().enumerate() {
        net = net
            .push(format!("enc{}", i + 1), LayerSpec::conv_replicate(c, *co, 3, 2))
            .push(format!("enc{}_act", i + 1), LayerSpec::Relu);
        c = *co;
    }
    net
}

/// Name of the last layer of encoder stage `tag` (`enc1`..`enc4`).
pub fn encoder_stop(tag: &str) -> Option<String> {
    (1..=ENCODER_CHANNELS.len())
        .find(|i| tag == format!("enc{i}"))
        .map(|i| format!("enc{i}_act"))
}

/// Stride of encoder stage `tag` relative to the input image.
pub fn encoder_stride(tag: &str) -> Option<usize> {
    (1..=ENCODER_CHANNELS.len())
        .find(|i| tag == format!("enc{i}"))
        .map(|i| 1 << i)
}

pub fn encoder_channels(tag: &str) -> Option<usize> {
    (1..=ENCODER_CHANNELS.len())
        .find(|i| tag == format!("enc{i}"))
        .map(|i| ENCODER_CHANNELS[i - 1])
}

/// Nearest-upsample + conv stages mirroring [`encoder`], ending in a sigmoid.
pub fn decoder(out_channels: usize) -> Sequential {
    let mut net = Sequential::new();
    let chans = [128, 64, 32, 16];
    for i in 0..3 {
        net = net
            .push(format!("dec{}_up", i + 1), LayerSpec::Upsample2)
            .push(
                format!("dec{}", i + 1),
                LayerSpec::conv_replicate(chans[i], chans[i + 1], 3, 1),
            )
            .push(format!("dec{}_act", i + 1), LayerSpec::Relu);
    }
    net.push("dec4_up", LayerSpec::Upsample2)
        .push("dec4", LayerSpec::conv_replicate(16, out_channels, 3, 1))
        .push("out", LayerSpec::Sigmoid)
}

pub fn check_input_shape(width: usize, height: usize, channels: usize) -> Result<(), GenerativeError> {
    if !width.is_multiple_of(ENCODER_STRIDE) || !height.is_multiple_of(ENCODER_STRIDE) || width == 0 || height == 0 {
        return Err(GenerativeError::UnsupportedShape(format!(
            "{width}x{height} is not a positive multiple of {ENCODER_STRIDE}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(GenerativeError::UnsupportedShape(format!("{channels} channels")));
    }
    Ok(())
}

/// Stacks same-shape images as an `[N, C, H, W]` tensor.
pub fn batch_tensor(images: &[&Image]) -> Tensor {
    let (w, h, c) = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * w * h * c);
    for img in images {
        data.extend(img.to_planar());
    }
    Tensor::new(vec![images.len(), c, h, w], data).expect("image data is finite")
}

/// Splits an `[N, C, H, W]` activation back into clamped images.
pub fn unbatch(values: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<Image> {
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let planar: Vec<f64> = values[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            Image::from_planar(w, h, c, &planar).expect("clamped planar data")
        })
        .collect()
}

/// VAE heads between the encoder and the decoder.
pub struct VaeHeads {
    pub flat: usize,
    pub latent: usize,
    pub bottleneck: [usize; 3],
}

impl VaeHeads {
    pub fn new(width: usize, height: usize, latent: usize) -> Self {
        let (bh, bw) = (height / ENCODER_STRIDE, width / ENCODER_STRIDE);
        let c = ENCODER_CHANNELS[3];
        Self {
            flat: c * bh * bw,
            latent,
            bottleneck: [c, bh, bw],
        }
    }

    pub fn layers(&self) -> [(&'static str, LayerSpec); 3] {
        [
            (
                "mu",
                LayerSpec::Linear {
                    in_features: self.flat,
                    out_features: self.latent,
                },
            ),
            (
                "logvar",
                LayerSpec::Linear {
                    in_features: self.flat,
                    out_features: self.latent,
                },
            ),
            (
                "expand",
                LayerSpec::Linear {
                    in_features: self.latent,
                    out_features: self.flat,
                },
            ),
        ]
    }

    /// Returns `(mu, logvar)` for an encoder output.
    pub fn encode(&self, ctx: &mut ForwardCtx, enc: Var) -> Result<(Var, Var), NnError> {
        let n = ctx.graph.shape(enc)[0];
        let flat = ctx.graph.reshape(enc, vec![n, self.flat])?;
        let [mu_l, lv_l, _] = self.layers();
        let mu = mu_l.1.forward(ctx, mu_l.0, flat, None)?;
        let lv = lv_l.1.forward(ctx, lv_l.0, flat, None)?;
        Ok((mu, lv))
    }

    /// Maps a latent batch to the decoder's input.
    pub fn expand(&self, ctx: &mut ForwardCtx, z: Var) -> Result<Var, NnError> {
        let n = ctx.graph.shape(z)[0];
        let [_, _, ex] = self.layers();
        let y = ex.1.forward(ctx, ex.0, z, None)?;
        let y = ctx.graph.relu(y)?;
        let [c, h, w] = self.bottleneck;
        ctx.graph.reshape(y, vec![n, c, h, w])
    }
}
