use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::Label;
use super::report::{EvalReport, ItemRow};
use super::EvalError;
use crate::generative::Generator;
use crate::imagecore::{
    abs_diff, gaussian_blur, postprocess, register_translation, save_image, save_mask_png, BitDepth, DetectionMask,
    DiffMap, Image, PostprocessConfig,
};
use crate::membank::{
    build_bank, classify, coreset_subsample, nominal_threshold, score_grid, Backbone, BackboneMeta, FeatureGrid,
    MemoryBank, Provenance, DEFAULT_K, MAP_SIGMA, THRESHOLD_MARGIN,
};
use crate::nncore::{checkpoint_hash, ModelParams};
use crate::segmenter::{
    default_decision_config, segmap_to_decision, segment, train_segmenter, LabeledPair, RefKind, SegmenterConfig,
};
use crate::util::{mix_seed, shuffled_order};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Classic,
    Supervised,
    Membank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefMode {
    Real,
    SimulatedInpaint,
    SimulatedVae,
}

impl RefMode {
    pub fn is_simulated(self) -> bool {
        self != RefMode::Real
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicConfig {
    pub postprocess: PostprocessConfig,
    /// Align the reference to the candidate before differencing.
    pub register: bool,
    pub max_shift: usize,
}

impl Default for ClassicConfig {
    fn default() -> Self {
        Self {
            postprocess: PostprocessConfig::default(),
            register: false,
            max_shift: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    /// Fraction of each label class used to train the segmenter; the rest is evaluated.
    pub train_fraction: f64,
    pub segmenter: SegmenterConfig,
    pub decision: PostprocessConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            segmenter: SegmenterConfig::default(),
            decision: default_decision_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembankConfig {
    pub layer_tag: String,
    pub k: usize,
    /// Greedy coreset fraction; `None` searches the full bank.
    pub coreset_fraction: Option<f64>,
    /// Share of the nominal trainset held out to set the threshold.
    pub validation_fraction: f64,
    pub threshold_margin: f64,
    pub map_sigma: f64,
}

impl Default for MembankConfig {
    fn default() -> Self {
        Self {
            layer_tag: "enc2".into(),
            k: DEFAULT_K,
            coreset_fraction: Some(0.1),
            validation_fraction: 0.2,
            threshold_margin: THRESHOLD_MARGIN,
            map_sigma: MAP_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub classic: ClassicConfig,
    pub supervised: SupervisedConfig,
    pub membank: MembankConfig,
    pub seed: u64,
    /// Where anomaly maps and masks are written; not part of the snapshot.
    #[serde(skip)]
    pub artifact_dir: Option<PathBuf>,
}

/// Externally computed feature grids keyed by image name: `train/<stem>`
/// for the nominal trainset (real bank and threshold validation),
/// `simulated/train/<stem>` for its simulated version, and `test/<item id>`
/// for candidates.
#[derive(Debug, Clone, Default)]
pub struct ImportedFeatures {
    pub source: String,
    pub grids: HashMap<String, FeatureGrid>,
}

impl ImportedFeatures {
    fn get(&self, key: &str) -> Result<&FeatureGrid, EvalError> {
        self.grids
            .get(key)
            .ok_or_else(|| EvalError::MissingPrerequisite(format!("imported features lack grid {key:?}")))
    }
}

/// Trained artifacts a run may need.
#[derive(Debug, Clone, Copy, Default)]
pub struct Prerequisites<'a> {
    pub inpainter: Option<&'a Generator>,
    pub vae: Option<&'a Generator>,
    /// Encoder checkpoint for the memory-bank pipeline.
    pub backbone: Option<&'a ModelParams>,
    /// Replaces the backbone when present.
    pub features: Option<&'a ImportedFeatures>,
}

impl<'a> Prerequisites<'a> {
    fn generator(&self, mode: RefMode) -> Result<Option<&'a Generator>, EvalError> {
        match mode {
            RefMode::Real => Ok(None),
            RefMode::SimulatedInpaint => self.inpainter.map(Some).ok_or_else(|| {
                EvalError::MissingPrerequisite(
                    "simulated-inpaint needs a trained inpainter (train-generator --kind inpaint)".into(),
                )
            }),
            RefMode::SimulatedVae => self.vae.map(Some).ok_or_else(|| {
                EvalError::MissingPrerequisite("simulated-vae needs a trained VAE (train-generator --kind vae)".into())
            }),
        }
    }
}

/// Per item: the reference used and how it was obtained.
fn references(
    ds: &Dataset,
    mode: RefMode,
    gen: Option<&Generator>,
    seed: u64,
) -> Result<(Vec<Image>, String), EvalError> {
    match gen {
        Some(g) => {
            let candidates: Vec<Image> = ds.test_items.iter().map(|i| i.candidate.clone()).collect();
            let sims = g.simulate_many(&candidates)?;
            let protocol = format!(
                "{} ({:?} mode) of each candidate; checkpoint {}",
                serde_json::to_value(mode).unwrap().as_str().unwrap(),
                g.mode(),
                g.checkpoint_hash()
            );
            Ok((sims.into_iter().map(|s| s.image).collect(), protocol))
        }
        None => {
            let mut substituted = 0;
            let refs = ds
                .test_items
                .iter()
                .enumerate()
                .map(|(i, item)| match &item.real_reference {
                    Some(r) => r.clone(),
                    None => {
                        substituted += 1;
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7e7 + i as u64));
                        ds.train_nominal[rng.random_range(0..ds.train_nominal.len())].clone()
                    }
                })
                .collect();
            let protocol = if substituted == 0 {
                "independently acquired reference per item".to_string()
            } else {
                format!(
                    "{substituted} items had no acquired reference; a seeded random nominal training image stands in"
                )
            };
            Ok((refs, protocol))
        }
    }
}

struct Outcome {
    row: ItemRow,
    map: Option<DiffMap>,
    mask: Option<DetectionMask>,
}

/// Runs one pipeline with one reference mode over the dataset's test items.
pub fn run_experiment(
    ds: &Dataset,
    pipeline: Pipeline,
    mode: RefMode,
    cfg: &ExperimentConfig,
    pre: &Prerequisites,
) -> Result<EvalReport, EvalError> {
    ds.validate()?;
    // Imported grids already include the simulated ones.
    let imported_bank = pipeline == Pipeline::Membank && pre.features.is_some();
    let gen = if imported_bank { None } else { pre.generator(mode)? };
    let mut checkpoints = BTreeMap::new();
    if let Some(g) = gen {
        checkpoints.insert("generator".to_string(), g.checkpoint_hash().to_string());
    }
    let (outcomes, protocol, threshold) = match pipeline {
        Pipeline::Classic => {
            let (refs, protocol) = references(ds, mode, gen, cfg.seed)?;
            (
                run_classic(ds, &refs, &cfg.classic)?,
                protocol,
                Some(cfg.classic.postprocess.threshold),
            )
        }
        Pipeline::Supervised => {
            let (refs, protocol) = references(ds, mode, gen, cfg.seed)?;
            let (out, seg_hash) = run_supervised(ds, &refs, mode, cfg)?;
            checkpoints.insert("segmenter".to_string(), seg_hash);
            (out, protocol, Some(cfg.supervised.decision.threshold))
        }
        Pipeline::Membank => {
            let (out, threshold, protocol, bank_hash) = run_membank(ds, mode, gen, cfg, pre)?;
            checkpoints.insert("backbone".to_string(), bank_hash);
            (out, protocol, Some(threshold))
        }
    };
    if let Some(dir) = &cfg.artifact_dir {
        write_artifacts(dir, pipeline, mode, &outcomes)?;
    }
    let snapshot = serde_json::json!({
        "pipeline": pipeline,
        "ref_mode": mode,
        "dataset": ds.name,
        "dataset_hash": ds.content_hash(),
        "experiment": cfg,
    });
    let rows = outcomes.into_iter().map(|o| o.row).collect();
    EvalReport::new(
        pipeline,
        mode,
        ds.name.clone(),
        rows,
        threshold,
        protocol,
        checkpoints,
        snapshot,
    )
}

fn classic_item(
    candidate: &Image,
    reference: &Image,
    cfg: &ClassicConfig,
) -> Result<(DiffMap, DetectionMask), EvalError> {
    let reference = if cfg.register {
        register_translation(reference, candidate, cfg.max_shift)?.warped
    } else {
        reference.clone()
    };
    let diff = abs_diff(candidate, &reference)?;
    let mask = postprocess(&diff, &cfg.postprocess)?;
    Ok((diff, mask))
}

fn run_classic(ds: &Dataset, refs: &[Image], cfg: &ClassicConfig) -> Result<Vec<Outcome>, EvalError> {
    cfg.postprocess.validate()?;
    ds.test_items
        .par_iter()
        .zip(refs)
        .map(|(item, r)| {
            let (diff, mask) = classic_item(&item.candidate, r, cfg)?;
            let blurred = gaussian_blur(diff.values(), diff.width(), diff.height(), cfg.postprocess.blur_sigma);
            Ok(Outcome {
                row: ItemRow {
                    id: item.id.clone(),
                    label: item.label,
                    decision: !mask.blobs().is_empty(),
                    score: blurred.iter().cloned().fold(0.0, f64::max),
                },
                map: Some(diff),
                mask: Some(mask),
            })
        })
        .collect()
}

/// Stratified split of item indices into (train, eval).
fn split_items(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::InvalidConfig(format!(
            "train_fraction {fraction} not in (0, 1)"
        )));
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (k, label) in [Label::Defective, Label::Nominal].into_iter().enumerate() {
        let idx: Vec<usize> = (0..ds.test_items.len())
            .filter(|i| ds.test_items[*i].label == label)
            .collect();
        let order = shuffled_order(idx.len(), mix_seed(seed, 0x5f17 + k as u64));
        let n_train = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        if n_train == 0 {
            return Err(EvalError::MissingPrerequisite(format!(
                "supervised pipeline needs at least two {label:?} test items to train and evaluate"
            )));
        }
        train.extend(order[..n_train].iter().map(|o| idx[*o]));
        eval.extend(order[n_train..].iter().map(|o| idx[*o]));
    }
    train.sort();
    eval.sort();
    Ok((train, eval))
}

fn run_supervised(
    ds: &Dataset,
    refs: &[Image],
    mode: RefMode,
    cfg: &ExperimentConfig,
) -> Result<(Vec<Outcome>, String), EvalError> {
    let (train_idx, eval_idx) = split_items(ds, cfg.supervised.train_fraction, cfg.seed)?;
    let (w, h, _) = ds.shape();
    let kind = if mode.is_simulated() {
        RefKind::Simulated
    } else {
        RefKind::Real
    };
    let pairs = train_idx
        .iter()
        .map(|i| {
            let item = &ds.test_items[*i];
            let truth = match (&item.truth, item.label) {
                (Some(t), _) => t.clone(),
                (None, Label::Nominal) => DetectionMask::empty(w, h),
                (None, Label::Defective) => {
                    return Err(EvalError::MissingPrerequisite(format!(
                        "supervised pipeline needs a truth mask for {}",
                        item.id
                    )))
                }
            };
            Ok(LabeledPair::new(item.candidate.clone(), refs[*i].clone(), truth, kind)?)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let seg_cfg = SegmenterConfig {
        seed: mix_seed(cfg.seed, 0x5e6),
        ..cfg.supervised.segmenter.clone()
    };
    let (params, _) = train_segmenter(&pairs, &seg_cfg)?;
    let hash = checkpoint_hash(&params);
    let outcomes = eval_idx
        .par_iter()
        .map(|i| {
            let item = &ds.test_items[*i];
            let seg = segment(&params, &item.candidate, &refs[*i])?;
            let d = segmap_to_decision(&seg, &cfg.supervised.decision)?;
            Ok(Outcome {
                row: ItemRow {
                    id: item.id.clone(),
                    label: item.label,
                    decision: d.defective,
                    score: d.max_prob,
                },
                map: Some(seg.to_diff_map()),
                mask: Some(d.mask),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok((outcomes, hash))
}

enum Features<'a> {
    Backbone(Box<Backbone>),
    Imported(&'a ImportedFeatures),
}

/// Seeded split of `n` nominal images into (bank, threshold-validation) indices.
pub fn bank_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::InvalidConfig(format!(
            "validation_fraction {fraction} not in (0, 1)"
        )));
    }
    if n < 2 {
        return Err(EvalError::MissingPrerequisite(
            "membank pipeline needs at least two nominal training images (bank + validation)".into(),
        ));
    }
    let order = shuffled_order(n, mix_seed(seed, 0xba4c));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut val = order[..n_val].to_vec();
    let mut bank = order[n_val..].to_vec();
    val.sort();
    bank.sort();
    Ok((bank, val))
}

type MembankOut = (Vec<Outcome>, f64, String, String);

fn run_membank(
    ds: &Dataset,
    mode: RefMode,
    gen: Option<&Generator>,
    cfg: &ExperimentConfig,
    pre: &Prerequisites,
) -> Result<MembankOut, EvalError> {
    let mc = &cfg.membank;
    let features = match (pre.features, pre.backbone) {
        (Some(f), _) => Features::Imported(f),
        (None, Some(b)) => Features::Backbone(Box::new(Backbone::new(b.clone(), &mc.layer_tag)?)),
        (None, None) => {
            return Err(EvalError::MissingPrerequisite(
                "membank pipeline needs a backbone checkpoint (the trained inpainter) or imported feature grids".into(),
            ))
        }
    };
    let provenance = if mode.is_simulated() {
        Provenance::SimulatedRef
    } else {
        Provenance::RealRef
    };
    let (bank_idx, val_idx) = bank_split(ds.train_nominal.len(), mc.validation_fraction, cfg.seed)?;

    let (bank, backbone_id) = match &features {
        Features::Backbone(bb) => {
            let source = ds.train_references.as_ref().unwrap_or(&ds.train_nominal);
            let images: Vec<Image> = bank_idx.iter().map(|i| source[*i].clone()).collect();
            let images = match gen {
                Some(g) => g.simulate_many(&images)?.into_iter().map(|s| s.image).collect(),
                None => images,
            };
            (build_bank(bb, &images, provenance)?, bb.checkpoint_hash().to_string())
        }
        Features::Imported(f) => {
            let prefix = if mode.is_simulated() {
                "simulated/train/"
            } else {
                "train/"
            };
            let grids = bank_idx
                .iter()
                .map(|i| f.get(&format!("{prefix}{}", ds.train_ids[*i])).cloned())
                .collect::<Result<Vec<_>, _>>()?;
            let meta = BackboneMeta {
                checkpoint_hash: f.source.clone(),
                layer_tag: "imported".into(),
            };
            (MemoryBank::from_grids(&grids, provenance, meta)?, f.source.clone())
        }
    };
    let bank = match mc.coreset_fraction {
        Some(fr) => coreset_subsample(&bank, fr, mix_seed(cfg.seed, 0xc05e))?,
        None => bank,
    };

    let grid_of = |key: String, img: &Image| -> Result<FeatureGrid, EvalError> {
        Ok(match &features {
            Features::Backbone(bb) => bb.extract(img)?,
            Features::Imported(f) => f.get(&key)?.clone(),
        })
    };
    let val_scores = val_idx
        .par_iter()
        .map(|i| {
            let g = grid_of(format!("train/{}", ds.train_ids[*i]), &ds.train_nominal[*i])?;
            Ok(score_grid(&bank, &g, mc.k, mc.map_sigma)?.image_score)
        })
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let threshold = nominal_threshold(&val_scores, mc.threshold_margin)?;

    let outcomes = ds
        .test_items
        .par_iter()
        .map(|item| {
            let g = grid_of(format!("test/{}", item.id), &item.candidate)?;
            let res = score_grid(&bank, &g, mc.k, mc.map_sigma)?;
            let map = DiffMap::new(res.width, res.height, res.map.clone())?;
            Ok(Outcome {
                row: ItemRow {
                    id: item.id.clone(),
                    label: item.label,
                    decision: classify(&res, threshold)?,
                    score: res.image_score,
                },
                map: Some(map),
                mask: None,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let source = if ds.train_references.is_some() {
        "training references"
    } else {
        "nominal training images"
    };
    let protocol = format!(
        "{} bank from {} {source}, threshold {:.6} = max of {} held-out nominal scores x {}",
        serde_json::to_value(provenance).unwrap().as_str().unwrap(),
        bank_idx.len(),
        threshold,
        val_idx.len(),
        mc.threshold_margin
    );
    Ok((outcomes, threshold, protocol, backbone_id))
}

fn write_artifacts(dir: &Path, pipeline: Pipeline, mode: RefMode, outcomes: &[Outcome]) -> Result<(), EvalError> {
    let tag = format!(
        "{}_{}",
        serde_json::to_value(pipeline).unwrap().as_str().unwrap(),
        serde_json::to_value(mode).unwrap().as_str().unwrap()
    );
    for o in outcomes {
        let base = dir.join(&tag);
        if let Some(map) = &o.map {
            let path = base.join("maps").join(format!("{}.png", o.row.id));
            mkparent(&path)?;
            let max = map.max();
            let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
            save_image(&path, &map.to_image(scale), BitDepth::Eight)?;
        }
        if let Some(mask) = &o.mask {
            let path = base.join("masks").join(format!("{}_mask.png", o.row.id));
            mkparent(&path)?;
            save_mask_png(&path, mask)?;
        }
    }
    Ok(())
}

fn mkparent(path: &Path) -> Result<(), EvalError> {
    let parent = path.parent().expect("artifact paths have a parent");
    std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
        path: parent.to_path_buf(),
        source,
    })
}
