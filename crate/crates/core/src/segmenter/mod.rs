//! Supervised defect segmentation over a (candidate, reference) pair.
//!
//! A three-level U-Net-style network sees the candidate and the reference
//! stacked as input channels and predicts two logits per pixel (background,
//! defect). Training minimizes class-balanced cross-entropy. The trainer is
//! agnostic to whether the references are real or simulated; one model is
//! trained per reference kind.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imagecore::{postprocess, DetectionMask, DiffMap, Image, ImageError, PostprocessConfig};
use crate::nncore::{
    adam_step, AdamConfig, AdamState, ForwardCtx, LayerSpec, ModelMeta, ModelParams, NnError, Tensor, Var,
};
use crate::util::{config_hash, mix_seed, shuffled_order};

pub const SEGMENTER_ARCH: &str = "refsim-segmenter-unet3-v1";

/// Spatial dims must be multiples of this (two 2× poolings).
pub const SEGMENTER_STRIDE: usize = 4;

/// Upper bound on the foreground class weight.
pub const MAX_FG_WEIGHT: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum SegmenterError {
    #[error("segmenter trainset is empty")]
    EmptyTrainset,
    #[error("pair {index}: {detail}")]
    PairShape { index: usize, detail: String },
    #[error("trainset has no {0} pair")]
    MissingClass(&'static str),
    #[error("trainset has no foreground pixels; the inverse-frequency weight is undefined")]
    NoForeground,
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("input shape {found:?} does not match trained shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefKind {
    Real,
    Simulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub candidate: Image,
    pub reference: Image,
    pub truth: DetectionMask,
    pub ref_kind: RefKind,
}

impl LabeledPair {
    pub fn new(
        candidate: Image,
        reference: Image,
        truth: DetectionMask,
        ref_kind: RefKind,
    ) -> Result<Self, SegmenterError> {
        let pair = Self {
            candidate,
            reference,
            truth,
            ref_kind,
        };
        pair.check()
            .map_err(|detail| SegmenterError::PairShape { index: 0, detail })?;
        Ok(pair)
    }

    fn check(&self) -> Result<(), String> {
        if !self.candidate.same_shape(&self.reference) {
            return Err(format!(
                "candidate {:?} and reference {:?} differ in shape",
                self.candidate.shape(),
                self.reference.shape()
            ));
        }
        if (self.truth.width(), self.truth.height()) != (self.candidate.width(), self.candidate.height()) {
            return Err(format!(
                "truth mask is {}x{}, candidate is {}x{}",
                self.truth.width(),
                self.truth.height(),
                self.candidate.width(),
                self.candidate.height()
            ));
        }
        Ok(())
    }
}

/// Per-pixel defect probability in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMap {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
}

impl SegMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[y * self.width + x]
    }

    pub fn to_diff_map(&self) -> DiffMap {
        DiffMap::new(self.width, self.height, self.probs.clone()).expect("probabilities are finite and nonnegative")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FgWeightMode {
    /// `w_fg = background / foreground` pixel counts, capped at [`MAX_FG_WEIGHT`].
    #[default]
    InverseFrequency,
    /// `w_fg = 1`.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub w_fg_mode: FgWeightMode,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 4,
            lr: 3e-3,
            w_fg_mode: FgWeightMode::InverseFrequency,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterReport {
    pub architecture_id: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub loss_history: Vec<f64>,
    pub w_fg: f64,
    pub foreground_pixels: usize,
    pub background_pixels: usize,
    pub ref_kind: Option<RefKind>,
}

/// `background / foreground` capped at [`MAX_FG_WEIGHT`].
pub fn inverse_frequency_weight(foreground: usize, background: usize) -> Result<f64, SegmenterError> {
    if foreground == 0 {
        return Err(SegmenterError::NoForeground);
    }
    Ok((background as f64 / foreground as f64).min(MAX_FG_WEIGHT))
}

struct Level {
    conv: String,
    norm: String,
}

fn level(name: &str) -> Level {
    Level {
        conv: name.to_string(),
        norm: format!("{name}_bn"),
    }
}

/// `(name, in, out)` of every conv + batch-norm block, in forward order.
fn blocks(in_channels: usize) -> [(&'static str, usize, usize); 5] {
    [
        ("enc1", 2 * in_channels, 8),
        ("enc2", 8, 16),
        ("mid", 16, 32),
        ("dec2", 32 + 16, 16),
        ("dec1", 16 + 8, 8),
    ]
}

fn init_params(params: &mut ModelParams, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
    for (name, ci, co) in blocks(in_channels) {
        LayerSpec::conv(ci, co, 3, 1).init(name, params, rng)?;
        LayerSpec::BatchNorm { channels: co }.init(&level(name).norm, params, rng)?;
    }
    LayerSpec::conv(8, 2, 1, 1).init("head", params, rng)
}

fn block(ctx: &mut ForwardCtx, name: &str, ci: usize, co: usize, x: Var) -> Result<Var, NnError> {
    let l = level(name);
    let y = LayerSpec::conv(ci, co, 3, 1).forward(ctx, &l.conv, x, None)?;
    let y = LayerSpec::BatchNorm { channels: co }.forward(ctx, &l.norm, y, None)?;
    ctx.graph.relu(y)
}

/// Logits `[N, 2, H, W]` for a stacked `[N, 2C, H, W]` input.
fn unet_forward(ctx: &mut ForwardCtx, in_channels: usize, x: Var) -> Result<Var, NnError> {
    let b = blocks(in_channels);
    let s1 = block(ctx, b[0].0, b[0].1, b[0].2, x)?;
    let p1 = ctx.graph.maxpool2(s1)?;
    let s2 = block(ctx, b[1].0, b[1].1, b[1].2, p1)?;
    let p2 = ctx.graph.maxpool2(s2)?;
    let m = block(ctx, b[2].0, b[2].1, b[2].2, p2)?;
    let u2 = ctx.graph.upsample2(m)?;
    let c2 = ctx.graph.concat(u2, s2)?;
    let d2 = block(ctx, b[3].0, b[3].1, b[3].2, c2)?;
    let u1 = ctx.graph.upsample2(d2)?;
    let c1 = ctx.graph.concat(u1, s1)?;
    let d1 = block(ctx, b[4].0, b[4].1, b[4].2, c1)?;
    LayerSpec::conv(8, 2, 1, 1).forward(ctx, "head", d1, None)
}

/// Candidate channels followed by reference channels, `[N, 2C, H, W]`.
fn stack(pairs: &[(&Image, &Image)]) -> Tensor {
    let (w, h, c) = pairs[0].0.shape();
    let mut data = Vec::with_capacity(pairs.len() * 2 * c * h * w);
    for (cand, reference) in pairs {
        data.extend(cand.to_planar());
        data.extend(reference.to_planar());
    }
    Tensor::new(vec![pairs.len(), 2 * c, h, w], data).expect("image data is finite")
}

fn check_shape(shape: (usize, usize, usize)) -> Result<(), SegmenterError> {
    let (w, h, c) = shape;
    if w == 0 || h == 0 || w % SEGMENTER_STRIDE != 0 || h % SEGMENTER_STRIDE != 0 {
        return Err(SegmenterError::UnsupportedShape(format!(
            "{w}x{h} is not a positive multiple of {SEGMENTER_STRIDE}"
        )));
    }
    if c != 1 && c != 3 {
        return Err(SegmenterError::UnsupportedShape(format!("{c} channels")));
    }
    Ok(())
}

fn labels_of(mask: &DetectionMask) -> impl Iterator<Item = f64> + '_ {
    mask.labels().iter().map(|l| if *l { 1.0 } else { 0.0 })
}

/// Minimizes class-balanced cross-entropy over the pairs with Adam and a
/// cosine learning-rate decay.
pub fn train_segmenter(
    pairs: &[LabeledPair],
    cfg: &SegmenterConfig,
) -> Result<(ModelParams, SegmenterReport), SegmenterError> {
    let first = pairs.first().ok_or(SegmenterError::EmptyTrainset)?;
    let shape = first.candidate.shape();
    for (index, p) in pairs.iter().enumerate() {
        p.check()
            .map_err(|detail| SegmenterError::PairShape { index, detail })?;
        if p.candidate.shape() != shape {
            return Err(SegmenterError::PairShape {
                index,
                detail: format!("shape {:?} differs from {:?}", p.candidate.shape(), shape),
            });
        }
    }
    check_shape(shape)?;
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(SegmenterError::InvalidConfig(format!(
            "epochs ({}) and batch ({}) must be positive, lr ({}) positive and finite",
            cfg.epochs, cfg.batch, cfg.lr
        )));
    }
    let fg: usize = pairs.iter().map(|p| p.truth.count()).sum();
    let total_px = pairs.len() * shape.0 * shape.1;
    let bg = total_px - fg;
    if fg == 0 {
        return Err(SegmenterError::NoForeground);
    }
    if !pairs.iter().any(|p| p.truth.is_empty()) {
        return Err(SegmenterError::MissingClass("clean"));
    }
    let w_fg = match cfg.w_fg_mode {
        FgWeightMode::InverseFrequency => inverse_frequency_weight(fg, bg)?,
        FgWeightMode::Unweighted => 1.0,
    };
    let ref_kind = if pairs.iter().all(|p| p.ref_kind == first.ref_kind) {
        Some(first.ref_kind)
    } else {
        None
    };

    let (w, h, c) = shape;
    let cfg_hash = config_hash(cfg);
    let mut meta = ModelMeta::new(SEGMENTER_ARCH);
    meta.training_config_hash = cfg_hash.clone();
    meta.epoch = cfg.epochs as u32;
    meta.info.insert("input_shape".into(), serde_json::json!([w, h, c]));
    meta.info.insert("w_fg".into(), serde_json::json!(w_fg));
    meta.info
        .insert("ref_kind".into(), serde_json::to_value(ref_kind).unwrap());
    let mut params = ModelParams::new(meta);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5e9));
    init_params(&mut params, c, &mut rng)?;

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let total_steps = cfg.epochs * pairs.len().div_ceil(cfg.batch);
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(pairs.len(), mix_seed(cfg.seed, 0x2000 + epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let on_err = |e: NnError| match e {
                NnError::NonFinite(op) => SegmenterError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("non-finite value in {op}"),
                },
                other => SegmenterError::Nn(other),
            };
            let batch: Vec<(&Image, &Image)> = chunk
                .iter()
                .map(|i| (&pairs[*i].candidate, &pairs[*i].reference))
                .collect();
            let labels: Vec<f64> = chunk.iter().flat_map(|i| labels_of(&pairs[*i].truth)).collect();
            let mut ctx = ForwardCtx::new(&params, true);
            let x = ctx.input(&stack(&batch));
            let logits = unet_forward(&mut ctx, c, x).map_err(on_err)?;
            let loss = ctx
                .graph
                .balanced_cross_entropy(logits, &labels, w_fg, 1.0)
                .map_err(on_err)?;
            params.zero_grads();
            let value = ctx.finish(&mut params, loss, 0.1).map_err(on_err)?;
            adam_step(&mut params, &mut state, &adam.cosine_at(step, total_steps)).map_err(on_err)?;
            step += 1;
            total += value * chunk.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        log::debug!("segmenter epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }

    let report = SegmenterReport {
        architecture_id: SEGMENTER_ARCH.into(),
        config: serde_json::to_value(cfg).unwrap(),
        config_hash: cfg_hash,
        loss_history: history,
        w_fg,
        foreground_pixels: fg,
        background_pixels: bg,
        ref_kind,
    };
    Ok((params, report))
}

fn trained_shape(params: &ModelParams) -> Result<(usize, usize, usize), SegmenterError> {
    if params.meta.architecture_id != SEGMENTER_ARCH {
        return Err(SegmenterError::ArchitectureMismatch {
            expected: SEGMENTER_ARCH.into(),
            found: params.meta.architecture_id.clone(),
        });
    }
    let bad = || SegmenterError::InvalidModel("meta lacks input_shape [width, height, channels]".into());
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

/// Defect-class softmax probability per pixel, using frozen batch-norm statistics.
pub fn segment(params: &ModelParams, candidate: &Image, reference: &Image) -> Result<SegMap, SegmenterError> {
    let shape = trained_shape(params)?;
    for img in [candidate, reference] {
        if img.shape() != shape {
            return Err(SegmenterError::ShapeMismatch {
                expected: shape,
                found: img.shape(),
            });
        }
    }
    let (w, h, c) = shape;
    let mut ctx = ForwardCtx::new(params, false);
    let x = ctx.input(&stack(&[(candidate, reference)]));
    let logits = unet_forward(&mut ctx, c, x)?;
    let v = ctx.graph.value(logits);
    let hw = w * h;
    let probs = (0..hw)
        .map(|i| {
            let d = v[hw + i] - v[i];
            // Softmax over two classes; exact 0 and 1 only on overflow.
            (1.0 / (1.0 + (-d).exp())).clamp(0.0, 1.0)
        })
        .collect();
    Ok(SegMap {
        width: w,
        height: h,
        probs,
    })
}

/// Postprocess defaults for probability maps.
pub fn default_decision_config() -> PostprocessConfig {
    PostprocessConfig {
        blur_sigma: 1.0,
        threshold: 0.5,
        open_radius: 1,
        min_area: 9,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegDecision {
    pub mask: DetectionMask,
    pub defective: bool,
    /// Largest probability in the map before post-processing.
    pub max_prob: f64,
}

/// Post-processes the probability map; the image is defective iff a blob survives.
pub fn segmap_to_decision(seg: &SegMap, cfg: &PostprocessConfig) -> Result<SegDecision, SegmenterError> {
    let mask = postprocess(&seg.to_diff_map(), cfg)?;
    let defective = !mask.blobs().is_empty();
    Ok(SegDecision {
        mask,
        defective,
        max_prob: seg.probs.iter().cloned().fold(0.0, f64::max),
    })
}

/// Pixel-level precision, recall and F-score of a predicted mask.
pub fn pixel_scores(pred: &DetectionMask, truth: &DetectionMask) -> BTreeMap<&'static str, f64> {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, t) in pred.labels().iter().zip(truth.labels()) {
        match (*p, *t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fnn == 0 {
        0.0
    } else {
        tp as f64 / (tp + fnn) as f64
    };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BTreeMap::from([("precision", precision), ("recall", recall), ("f_score", f)])
}
