use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::arch::{batch_tensor, check_input_shape, decoder, encoder, VaeHeads, INPAINTER_ARCH, VAE_ARCH};
use super::mask::{make_mask_grid, PHASES};
use super::simulate::{inpaint_forward, vae_forward, Generator, SimulateMode};
use super::GenerativeError;
use crate::imagecore::Image;
use crate::nncore::{adam_step, AdamConfig, AdamState, ForwardCtx, ModelMeta, ModelParams, NnError, Tensor};
use crate::util::{config_hash, mix_seed, psnr, shuffled_order};

/// Which pixels the reconstruction loss covers during inpainter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossRegion {
    /// Every pixel of the target image.
    #[default]
    Full,
    /// Only the pixels hidden by the mask phase.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    pub cell: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Peak Adam learning rate, cosine-decayed to a tenth by the last step.
    pub lr: f64,
    pub seed: u64,
    pub loss_region: LossRegion,
    pub simulate_mode: SimulateMode,
    /// Fraction of the trainset held out for the metrics stored in meta.
    pub holdout_fraction: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            cell: 8,
            epochs: 20,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            loss_region: LossRegion::Full,
            simulate_mode: SimulateMode::Unmasked,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Peak Adam learning rate, cosine-decayed to a tenth by the last step.
    pub lr: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            beta: 0.1,
            epochs: 20,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

/// Initial posterior log-variance. Unit-variance samples at initialization
/// drown the untrained `mu` and the decoder learns to ignore the latent.
const LOGVAR_INIT: f64 = -6.0;

/// Loss history and held-out metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub architecture_id: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    pub train_count: usize,
    pub held_out_count: usize,
    /// True when the trainset was too small to hold anything out.
    pub held_out_is_train: bool,
    pub metrics: BTreeMap<String, f64>,
}

struct Split<'a> {
    train: Vec<&'a Image>,
    held_out: Vec<&'a Image>,
    held_out_is_train: bool,
}

fn validate(trainset: &[Image]) -> Result<(usize, usize, usize), GenerativeError> {
    let first = trainset.first().ok_or(GenerativeError::EmptyTrainset)?;
    let shape = first.shape();
    if let Some(bad) = trainset.iter().find(|i| i.shape() != shape) {
        return Err(GenerativeError::ShapeMismatch {
            expected: shape,
            found: bad.shape(),
        });
    }
    check_input_shape(shape.0, shape.1, shape.2)?;
    Ok(shape)
}

fn split(trainset: &[Image], fraction: f64, seed: u64) -> Result<Split<'_>, GenerativeError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(GenerativeError::InvalidConfig(format!(
            "holdout_fraction {fraction} not in [0, 1)"
        )));
    }
    let n = trainset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x401d)));
    let n_hold = if n >= 2 && fraction > 0.0 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let (hold, train) = idx.split_at(n_hold);
    let train: Vec<&Image> = train.iter().map(|i| &trainset[*i]).collect();
    Ok(if hold.is_empty() {
        Split {
            held_out: train.clone(),
            train,
            held_out_is_train: true,
        }
    } else {
        Split {
            held_out: hold.iter().map(|i| &trainset[*i]).collect(),
            train,
            held_out_is_train: false,
        }
    })
}

fn check_common(epochs: usize, batch: usize, lr: f64) -> Result<(), GenerativeError> {
    if epochs == 0 || batch == 0 || !(lr > 0.0 && lr.is_finite()) {
        return Err(GenerativeError::InvalidConfig(format!(
            "epochs ({epochs}) and batch ({batch}) must be positive, lr ({lr}) positive and finite"
        )));
    }
    Ok(())
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(NnError) -> GenerativeError {
    move |e| match e {
        NnError::NonFinite(op) => GenerativeError::Diverged {
            epoch,
            batch,
            detail: format!("non-finite value in {op}"),
        },
        other => GenerativeError::Nn(other),
    }
}

fn base_meta(arch: &str, cfg_hash: String, epochs: usize, shape: (usize, usize, usize)) -> ModelMeta {
    let mut meta = ModelMeta::new(arch);
    meta.training_config_hash = cfg_hash;
    meta.epoch = epochs as u32;
    meta.info
        .insert("input_shape".into(), serde_json::json!([shape.0, shape.1, shape.2]));
    meta
}

/// Trains `CNN(R·B) ≈ R` over both phases of a freshly seeded mask grid per batch.
pub fn train_inpainter(trainset: &[Image], cfg: &InpaintConfig) -> Result<(ModelParams, TrainReport), GenerativeError> {
    let shape = validate(trainset)?;
    check_common(cfg.epochs, cfg.batch, cfg.lr)?;
    let (w, h, c) = shape;
    make_mask_grid(w, h, cfg.cell, 0)?;
    let data = split(trainset, cfg.holdout_fraction, cfg.seed)?;
    let cfg_hash = config_hash(cfg);

    let mut params = ModelParams::new(base_meta(INPAINTER_ARCH, cfg_hash.clone(), cfg.epochs, shape));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1417));
    encoder(c).init(&mut params, &mut rng)?;
    decoder(c).init(&mut params, &mut rng)?;

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * data.train.len().div_ceil(cfg.batch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.train.len(), mix_seed(cfg.seed, 0x1000 + epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let grid = make_mask_grid(w, h, cfg.cell, mix_seed(cfg.seed, ((epoch as u64) << 24) | b as u64))?;
            let mut inputs = Vec::with_capacity(chunk.len() * PHASES);
            let mut targets = Vec::with_capacity(chunk.len() * PHASES);
            for i in chunk {
                for p in 0..PHASES {
                    inputs.push(grid.apply(p, data.train[*i]));
                    targets.push(data.train[*i]);
                }
            }
            let on_err = diverged(epoch, b);
            let mut ctx = ForwardCtx::new(&params, true);
            let x = ctx.input(&batch_tensor(&inputs.iter().collect::<Vec<_>>()));
            let t = ctx.input(&batch_tensor(&targets));
            let y = inpaint_forward(&mut ctx, c, x).map_err(&on_err)?;
            let loss = match cfg.loss_region {
                LossRegion::Full => ctx.graph.mse_loss(y, t),
                LossRegion::Hidden => {
                    let mut weights = Vec::with_capacity(inputs.len() * c * h * w);
                    for _ in chunk {
                        for p in 0..PHASES {
                            for _ in 0..c {
                                weights.extend(grid.masks[p].data().iter().map(|b| 1.0 - b));
                            }
                        }
                    }
                    ctx.graph.weighted_mse_loss(y, t, weights)
                }
            }
            .map_err(&on_err)?;
            params.zero_grads();
            let value = ctx.finish(&mut params, loss, 0.1).map_err(&on_err)?;
            adam_step(&mut params, &mut state, &adam.cosine_at(step, total_steps)).map_err(&on_err)?;
            step += 1;
            total += value * chunk.len() as f64;
        }
        let mean = total / data.train.len() as f64;
        log::debug!("inpainter epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }

    let info = &mut params.meta.info;
    info.insert("cell".into(), cfg.cell.into());
    info.insert("mask_seed".into(), mix_seed(cfg.seed, 0x57c4).into());
    info.insert("loss_region".into(), serde_json::to_value(cfg.loss_region).unwrap());
    info.insert("simulate_mode".into(), serde_json::to_value(cfg.simulate_mode).unwrap());

    let metrics = inpaint_metrics(&params, &data)?;
    for (k, v) in &metrics {
        params.meta.info.insert(k.clone(), serde_json::json!(v));
    }
    let report = TrainReport {
        architecture_id: INPAINTER_ARCH.into(),
        config: serde_json::to_value(cfg).unwrap(),
        config_hash: cfg_hash,
        loss_history: history,
        train_count: data.train.len(),
        held_out_count: if data.held_out_is_train { 0 } else { data.held_out.len() },
        held_out_is_train: data.held_out_is_train,
        metrics,
    };
    Ok((params, report))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// `simulate_mse` and `psnr_floor` of the default inference path on held-out images.
fn simulate_metrics(gen: &Generator, held_out: &[&Image]) -> Result<BTreeMap<String, f64>, GenerativeError> {
    let mut total = 0.0;
    let mut floor = f64::INFINITY;
    for img in held_out {
        let sim = gen.simulate(img)?;
        total += mse(sim.image.data(), img.data());
        floor = floor.min(psnr(sim.image.data(), img.data()));
    }
    let mut m = BTreeMap::new();
    m.insert("held_out_simulate_mse".into(), total / held_out.len() as f64);
    m.insert("psnr_floor".into(), floor);
    Ok(m)
}

/// Held-out metrics of the inpainter. `held_out_recon_mse` is the training
/// objective (full-image error of `CNN(R·B)` over both phases);
/// `held_out_masked_mse` restricts it to the hidden pixels, and
/// `mean_baseline_masked_mse` scores predicting the trainset mean there.
fn inpaint_metrics(params: &ModelParams, data: &Split) -> Result<BTreeMap<String, f64>, GenerativeError> {
    let gen = Generator::new(params.clone())?;
    let mut m = simulate_metrics(&gen, &data.held_out)?;

    let train_mean = data.train.iter().map(|i| i.mean()).sum::<f64>() / data.train.len() as f64;
    let grid = gen.stitch_grid()?;
    let (mut full, mut hidden, mut base, mut n_full, mut n_hidden) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for img in &data.held_out {
        let preds = gen.reconstruct_phases(img, &grid)?;
        let (w, h, c) = img.shape();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let truth = img.get(x, y, ch);
                    for (p, pred) in preds.iter().enumerate() {
                        let e = (pred.get(x, y, ch) - truth).powi(2);
                        full += e;
                        n_full += 1;
                        if grid.is_hidden(p, x, y) {
                            hidden += e;
                            base += (train_mean - truth).powi(2);
                            n_hidden += 1;
                        }
                    }
                }
            }
        }
    }
    m.insert("held_out_recon_mse".into(), full / n_full as f64);
    m.insert("held_out_masked_mse".into(), hidden / n_hidden as f64);
    m.insert("mean_baseline_masked_mse".into(), base / n_hidden as f64);
    Ok(m)
}

/// Trains a diagonal-Gaussian VAE with `mse + beta · KL / pixels` and
/// reparameterized sampling; `beta == 0` trains a plain autoencoder on `mu`.
pub fn train_vae(trainset: &[Image], cfg: &VaeConfig) -> Result<(ModelParams, TrainReport), GenerativeError> {
    let shape = validate(trainset)?;
    check_common(cfg.epochs, cfg.batch, cfg.lr)?;
    if cfg.latent_dim == 0 || !(cfg.beta >= 0.0 && cfg.beta.is_finite()) {
        return Err(GenerativeError::InvalidConfig(format!(
            "latent_dim must be positive and beta nonnegative (got {}, {})",
            cfg.latent_dim, cfg.beta
        )));
    }
    let (w, h, c) = shape;
    let data = split(trainset, cfg.holdout_fraction, cfg.seed)?;
    let cfg_hash = config_hash(cfg);
    let heads = VaeHeads::new(w, h, cfg.latent_dim);
    let pixels = (w * h * c) as f64;

    let mut params = ModelParams::new(base_meta(VAE_ARCH, cfg_hash.clone(), cfg.epochs, shape));
    params.meta.info.insert("latent_dim".into(), cfg.latent_dim.into());
    params.meta.info.insert("beta".into(), serde_json::json!(cfg.beta));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7ae));
    encoder(c).init(&mut params, &mut rng)?;
    for (name, layer) in heads.layers() {
        layer.init(name, &mut params, &mut rng)?;
    }
    decoder(c).init(&mut params, &mut rng)?;
    params.get_mut("logvar.bias")?.data_mut().fill(LOGVAR_INIT);

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * data.train.len().div_ceil(cfg.batch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(data.train.len(), mix_seed(cfg.seed, 0x1000 + epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let on_err = diverged(epoch, b);
            let imgs: Vec<&Image> = chunk.iter().map(|i| data.train[*i]).collect();
            let mut ctx = ForwardCtx::new(&params, true);
            let xt = batch_tensor(&imgs);
            let x = ctx.input(&xt);
            let noise = (cfg.beta > 0.0).then(|| {
                let mut nrng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, ((epoch as u64) << 24) | b as u64));
                let n = imgs.len() * cfg.latent_dim;
                let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut nrng)).collect();
                Tensor::new(vec![imgs.len(), cfg.latent_dim], eps).expect("finite noise")
            });
            let out = vae_forward(&mut ctx, &heads, c, x, noise.as_ref()).map_err(&on_err)?;
            let recon = ctx.graph.mse_loss(out.recon, x).map_err(&on_err)?;
            let loss = if cfg.beta > 0.0 {
                let kl = ctx.graph.kl_diag_gaussian(out.mu, out.logvar).map_err(&on_err)?;
                let kl = ctx.graph.scale(kl, cfg.beta / pixels).map_err(&on_err)?;
                ctx.graph.add(recon, kl).map_err(&on_err)?
            } else {
                recon
            };
            params.zero_grads();
            let value = ctx.finish(&mut params, loss, 0.1).map_err(&on_err)?;
            adam_step(&mut params, &mut state, &adam.cosine_at(step, total_steps)).map_err(&on_err)?;
            step += 1;
            total += value * chunk.len() as f64;
        }
        let mean = total / data.train.len() as f64;
        log::debug!("vae epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }

    let gen = Generator::new(params.clone())?;
    let mut metrics = simulate_metrics(&gen, &data.held_out)?;
    metrics.insert("held_out_recon_mse".into(), metrics["held_out_simulate_mse"]);
    metrics.insert(
        "held_out_kl_per_dim".into(),
        vae_kl_per_dim(&params, &data.held_out, &heads, c)?,
    );
    for (k, v) in &metrics {
        params.meta.info.insert(k.clone(), serde_json::json!(v));
    }
    let report = TrainReport {
        architecture_id: VAE_ARCH.into(),
        config: serde_json::to_value(cfg).unwrap(),
        config_hash: cfg_hash,
        loss_history: history,
        train_count: data.train.len(),
        held_out_count: if data.held_out_is_train { 0 } else { data.held_out.len() },
        held_out_is_train: data.held_out_is_train,
        metrics,
    };
    Ok((params, report))
}

/// Mean per-image KL to the prior, divided by the latent dimension.
fn vae_kl_per_dim(params: &ModelParams, images: &[&Image], heads: &VaeHeads, c: usize) -> Result<f64, GenerativeError> {
    let mut ctx = ForwardCtx::new(params, false);
    let x = ctx.input(&batch_tensor(images));
    let out = vae_forward(&mut ctx, heads, c, x, None)?;
    let kl = ctx.graph.kl_diag_gaussian(out.mu, out.logvar)?;
    Ok(ctx.graph.scalar(kl) / heads.latent as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(n: usize, v: f64) -> Vec<Image> {
        (0..n).map(|_| Image::filled(16, 16, 1, v).unwrap()).collect()
    }

    #[test]
    fn rejects_bad_trainsets() {
        assert!(matches!(
            train_inpainter(&[], &InpaintConfig::default()),
            Err(GenerativeError::EmptyTrainset)
        ));
        let mixed = vec![
            Image::filled(16, 16, 1, 0.5).unwrap(),
            Image::filled(32, 16, 1, 0.5).unwrap(),
        ];
        assert!(matches!(
            train_inpainter(&mixed, &InpaintConfig::default()),
            Err(GenerativeError::ShapeMismatch { .. })
        ));
        let odd = vec![Image::filled(20, 20, 1, 0.5).unwrap()];
        assert!(matches!(
            train_vae(&odd, &VaeConfig::default()),
            Err(GenerativeError::UnsupportedShape(_))
        ));
    }

    #[test]
    fn constant_images_are_learned() {
        let cfg = InpaintConfig {
            cell: 4,
            epochs: 40,
            batch: 4,
            lr: 3e-3,
            ..InpaintConfig::default()
        };
        let (params, report) = train_inpainter(&constants(8, 0.4), &cfg).unwrap();
        let mse = params.meta.info_f64("held_out_recon_mse").unwrap();
        assert!(mse < 1e-4, "{mse} {:?}", report.loss_history);
    }

    #[test]
    fn loss_history_is_reproducible() {
        let cfg = InpaintConfig {
            cell: 4,
            epochs: 2,
            batch: 2,
            ..InpaintConfig::default()
        };
        let imgs: Vec<Image> = (0..4)
            .map(|i| {
                Image::new(
                    16,
                    16,
                    1,
                    (0..256).map(|p| ((p * (i + 1)) % 17) as f64 / 17.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let (a, ra) = train_inpainter(&imgs, &cfg).unwrap();
        let (b, rb) = train_inpainter(&imgs, &cfg).unwrap();
        assert_eq!(ra.loss_history, rb.loss_history);
        assert_eq!(a, b);
        let vcfg = VaeConfig {
            epochs: 2,
            batch: 2,
            latent_dim: 8,
            ..VaeConfig::default()
        };
        assert_eq!(
            train_vae(&imgs, &vcfg).unwrap().1.loss_history,
            train_vae(&imgs, &vcfg).unwrap().1.loss_history
        );
    }

    #[test]
    fn vae_on_constants_has_small_kl() {
        let cfg = VaeConfig {
            latent_dim: 8,
            epochs: 60,
            batch: 2,
            lr: 3e-3,
            ..VaeConfig::default()
        };
        let (params, _) = train_vae(&constants(8, 0.6), &cfg).unwrap();
        let kl = params.meta.info_f64("held_out_kl_per_dim").unwrap();
        assert!(kl < 0.1, "kl per dim {kl}");
    }
}
