use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use refsim_core::eval::{
    bank_split, run_experiment, save_dataset, write_report, Dataset, Label, Pipeline, Prerequisites, RefMode,
    SyntheticConfig,
};
use refsim_core::generative::{train_inpainter, train_vae, Generator};
use refsim_core::imagecore::{
    abs_diff, gaussian_blur, load_image, postprocess, save_image, save_mask_png, BitDepth, DetectionMask, DiffMap,
    Image,
};
use refsim_core::membank;
use refsim_core::membank::{
    classify, coreset_subsample, load_bank, nominal_threshold, save_bank, score_grid, Backbone, MemoryBank, Provenance,
};
use refsim_core::nncore::save_checkpoint;
use refsim_core::segmenter::{self, segmap_to_decision, segment, LabeledPair, RefKind};
use refsim_core::util::mix_seed;
use serde::{Deserialize, Serialize};

use crate::config::{load_generator, load_params, require_file, write_file, write_json, RunConfig};
use crate::error::CliError;
use crate::{
    BuildBankArgs, DetectArgs, EvaluateArgs, Kind, MakeSynthArgs, SimulateArgs, TrainGeneratorArgs, TrainSegmenterArgs,
};

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Timestamps live only in this sidecar so the other outputs stay byte-identical across reruns.
fn write_run_log(path: &Path, command: &str, started: f64, elapsed: f64) -> Result<(), CliError> {
    let text = format!("command={command}\nstarted_unix={started:.3}\nelapsed_s={elapsed:.3}\n");
    write_file(path, text.as_bytes())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn png_inputs(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    require_file(path)?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(CliError::io(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", path.display())));
    }
    Ok(files)
}

fn load_images(files: &[PathBuf]) -> Result<Vec<Image>, CliError> {
    files
        .iter()
        .map(|p| {
            load_image(p).map_err(|e| CliError::File {
                path: p.clone(),
                source: e.into(),
            })
        })
        .collect()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

struct Trainset {
    images: Vec<Image>,
    ids: Vec<String>,
    /// Real reference per training image, when the dataset has them.
    references: Option<Vec<Image>>,
}

/// Nominal images from `--images` (acknowledged) or the dataset's training split.
fn nominal_trainset(cfg: &RunConfig, images: Option<&Path>, acknowledged: bool) -> Result<Trainset, CliError> {
    match images {
        Some(dir) => {
            if !acknowledged {
                return Err(CliError::Usage(format!(
                    "{} is not a dataset's nominal split and may contain defects; pass --accept-possible-defects to train on it anyway",
                    dir.display()
                )));
            }
            let files = png_inputs(dir)?;
            Ok(Trainset {
                images: load_images(&files)?,
                ids: files.iter().map(|f| file_stem(f)).collect(),
                references: None,
            })
        }
        None => {
            let ds = cfg.load_dataset()?;
            Ok(Trainset {
                images: ds.train_nominal,
                ids: ds.train_ids,
                references: ds.train_references,
            })
        }
    }
}

pub fn train_generator(a: TrainGeneratorArgs) -> Result<(), CliError> {
    let (started, clock) = (unix_now(), Instant::now());
    let mut cfg = a.common.run_config()?;
    if let Some(e) = a.epochs {
        cfg.inpaint.epochs = e;
        cfg.vae.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.inpaint.lr = lr;
        cfg.vae.lr = lr;
    }
    if let Some(b) = a.batch {
        cfg.inpaint.batch = b;
        cfg.vae.batch = b;
    }
    if let Some(r) = a.loss_region {
        cfg.inpaint.loss_region = r.into();
    }
    if let Some(m) = a.simulate_mode {
        cfg.inpaint.simulate_mode = m.into();
    }
    let out = cfg.out_path()?.to_path_buf();
    let trainset = nominal_trainset(&cfg, a.images.as_deref(), a.accept_possible_defects)?.images;
    let (params, report) = match a.kind {
        Kind::Inpaint => train_inpainter(&trainset, &cfg.inpaint)?,
        Kind::Vae => train_vae(&trainset, &cfg.vae)?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    save_checkpoint(&params, &out)?;
    write_json(&sidecar(&out, "loss.json"), &report)?;
    write_run_log(
        &sidecar(&out, "log"),
        "train-generator",
        started,
        clock.elapsed().as_secs_f64(),
    )
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut g = load_generator(&a.checkpoint)?;
    if let Some(m) = a.mode {
        g.set_mode(m.into());
    }
    let files = png_inputs(&a.input)?;
    std::fs::create_dir_all(&a.out).map_err(CliError::io(&a.out))?;
    for f in &files {
        let attribute = |e: refsim_core::Error| CliError::File {
            path: f.clone(),
            source: e,
        };
        let img = load_image(f).map_err(|e| attribute(e.into()))?;
        let sim = g.simulate(&img).map_err(|e| attribute(e.into()))?;
        let dest = a.out.join(format!("{}_simref.png", file_stem(f)));
        save_image(&dest, &sim.image, BitDepth::Sixteen)?;
    }
    Ok(())
}

/// References per test item for the given mode; real mode requires acquired references.
fn item_references(ds: &Dataset, gen: Option<&Generator>) -> Result<Vec<Image>, CliError> {
    match gen {
        Some(g) => {
            let candidates: Vec<Image> = ds.test_items.iter().map(|i| i.candidate.clone()).collect();
            Ok(g.simulate_many(&candidates)?.into_iter().map(|s| s.image).collect())
        }
        None => ds
            .test_items
            .iter()
            .map(|i| {
                i.real_reference.clone().ok_or_else(|| {
                    CliError::Usage(format!(
                        "item {} has no real reference; add reference/<category>/<stem>.png or use a simulated ref mode",
                        i.id
                    ))
                })
            })
            .collect(),
    }
}

pub fn train_segmenter(a: TrainSegmenterArgs) -> Result<(), CliError> {
    let (started, clock) = (unix_now(), Instant::now());
    let mut cfg = a.common.run_config()?;
    a.models.apply(&mut cfg);
    if let Some(m) = a.ref_mode {
        cfg.ref_mode = Some(m.into());
    }
    if let Some(e) = a.epochs {
        cfg.segmenter.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.segmenter.lr = lr;
    }
    let out = cfg.out_path()?.to_path_buf();
    let ds = cfg.load_dataset()?;
    let mode = cfg.ref_mode();
    let gen = cfg.generator(mode)?;
    let refs = item_references(&ds, gen.as_ref())?;
    let (w, h, _) = ds.shape();
    let kind = if mode.is_simulated() {
        RefKind::Simulated
    } else {
        RefKind::Real
    };
    let pairs = ds
        .test_items
        .iter()
        .zip(refs)
        .map(|(item, r)| {
            let truth = match (&item.truth, item.label) {
                (Some(t), _) => t.clone(),
                (None, Label::Nominal) => DetectionMask::empty(w, h),
                (None, Label::Defective) => {
                    return Err(CliError::Usage(format!("defective item {} has no truth mask", item.id)))
                }
            };
            Ok(LabeledPair::new(item.candidate.clone(), r, truth, kind)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (params, report) = segmenter::train_segmenter(&pairs, &cfg.segmenter)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    save_checkpoint(&params, &out)?;
    write_json(&sidecar(&out, "loss.json"), &report)?;
    write_run_log(
        &sidecar(&out, "log"),
        "train-segmenter",
        started,
        clock.elapsed().as_secs_f64(),
    )
}

/// Decision calibration stored next to a bank file.
#[derive(Debug, Serialize, Deserialize)]
struct BankCalibration {
    layer_tag: String,
    k: usize,
    map_sigma: f64,
    threshold: f64,
    threshold_margin: f64,
    validation_ids: Vec<String>,
    validation_scores: Vec<f64>,
    bank_images: usize,
}

pub fn build_bank(a: BuildBankArgs) -> Result<(), CliError> {
    let mut cfg = a.common.run_config()?;
    a.models.apply(&mut cfg);
    if let Some(m) = a.ref_mode {
        cfg.ref_mode = Some(m.into());
    }
    let mc = &mut cfg.experiment.membank;
    if let Some(l) = &a.layer {
        mc.layer_tag.clone_from(l);
    }
    if let Some(f) = a.coreset {
        mc.coreset_fraction = Some(f);
    }
    if a.no_coreset {
        mc.coreset_fraction = None;
    }
    if let Some(k) = a.k {
        mc.k = k;
    }
    let mc = cfg.experiment.membank.clone();
    let out = cfg.out_path()?.to_path_buf();
    let bb_path = cfg
        .backbone_path()
        .ok_or_else(|| CliError::Usage("build-bank needs --backbone (or --inpainter) checkpoint".into()))?
        .to_path_buf();
    let backbone = Backbone::new(load_params(&bb_path)?, &mc.layer_tag)?;
    let mode = cfg.ref_mode();
    let gen = cfg.generator(mode)?;
    let Trainset {
        images,
        ids,
        references,
    } = nominal_trainset(&cfg, a.images.as_deref(), a.accept_possible_defects)?;
    let (bank_idx, val_idx) = bank_split(images.len(), mc.validation_fraction, cfg.experiment.seed)?;
    let source = references.as_ref().unwrap_or(&images);
    let mut bank_images: Vec<Image> = bank_idx.iter().map(|i| source[*i].clone()).collect();
    if let Some(g) = &gen {
        bank_images = g.simulate_many(&bank_images)?.into_iter().map(|s| s.image).collect();
    }
    let provenance = if mode.is_simulated() {
        Provenance::SimulatedRef
    } else {
        Provenance::RealRef
    };
    let mut bank = membank::build_bank(&backbone, &bank_images, provenance)?;
    if let Some(f) = mc.coreset_fraction {
        bank = coreset_subsample(&bank, f, mix_seed(cfg.experiment.seed, 0xc05e))?;
    }
    let validation_scores = val_idx
        .iter()
        .map(|i| Ok(score_grid(&bank, &backbone.extract(&images[*i])?, mc.k, mc.map_sigma)?.image_score))
        .collect::<Result<Vec<f64>, CliError>>()?;
    let threshold = nominal_threshold(&validation_scores, mc.threshold_margin)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    save_bank(&out, &bank)?;
    write_json(
        &sidecar(&out, "calibration.json"),
        &BankCalibration {
            layer_tag: mc.layer_tag.clone(),
            k: mc.k,
            map_sigma: mc.map_sigma,
            threshold,
            threshold_margin: mc.threshold_margin,
            validation_ids: val_idx.iter().map(|i| ids[*i].clone()).collect(),
            validation_scores,
            bank_images: bank_idx.len(),
        },
    )
}

#[derive(Debug, Serialize)]
struct Detection {
    file: String,
    defective: bool,
    score: f64,
}

fn save_map(path: &Path, map: &DiffMap) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let max = map.max();
    save_image(
        path,
        &map.to_image(if max > 0.0 { 1.0 / max } else { 1.0 }),
        BitDepth::Eight,
    )?;
    Ok(())
}

fn save_mask(path: &Path, mask: &DetectionMask) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    save_mask_png(path, mask)?;
    Ok(())
}

pub fn detect(a: DetectArgs) -> Result<(), CliError> {
    let mut cfg = a.common.run_config()?;
    a.models.apply(&mut cfg);
    if let Some(p) = a.pipeline {
        cfg.pipeline = Some(p.into());
    }
    if let Some(m) = a.ref_mode {
        cfg.ref_mode = Some(m.into());
    }
    let pipeline = cfg
        .pipeline
        .ok_or_else(|| CliError::Usage("no pipeline given (--pipeline or \"pipeline\" in the config)".into()))?;
    let out = cfg.out_path()?.to_path_buf();
    let files = png_inputs(&a.input)?;
    let candidates = load_images(&files)?;
    let mode = cfg.ref_mode();

    let references = || -> Result<Vec<Image>, CliError> {
        if let Some(g) = cfg.generator(mode)? {
            return Ok(g.simulate_many(&candidates)?.into_iter().map(|s| s.image).collect());
        }
        let dir = a
            .reference
            .as_deref()
            .ok_or_else(|| CliError::Usage("ref mode real needs --reference <dir> with matching file names".into()))?;
        let paths: Vec<PathBuf> = files.iter().map(|f| dir.join(f.file_name().expect("file"))).collect();
        for p in &paths {
            require_file(p)?;
        }
        load_images(&paths)
    };

    let mut rows = Vec::with_capacity(files.len());
    match pipeline {
        Pipeline::Classic => {
            let pp = &cfg.experiment.classic.postprocess;
            for ((f, c), r) in files.iter().zip(&candidates).zip(references()?) {
                let diff = abs_diff(c, &r).map_err(|e| CliError::File {
                    path: f.clone(),
                    source: e.into(),
                })?;
                let mask = postprocess(&diff, pp)?;
                let blurred = gaussian_blur(diff.values(), diff.width(), diff.height(), pp.blur_sigma);
                let stem = file_stem(f);
                save_map(&out.join("maps").join(format!("{stem}.png")), &diff)?;
                save_mask(&out.join("masks").join(format!("{stem}_mask.png")), &mask)?;
                rows.push(Detection {
                    file: stem,
                    defective: !mask.is_empty(),
                    score: blurred.iter().cloned().fold(0.0, f64::max),
                });
            }
        }
        Pipeline::Supervised => {
            let seg_path = cfg.models.segmenter.clone().ok_or_else(|| {
                CliError::Usage("supervised pipeline needs --segmenter (from train-segmenter)".into())
            })?;
            let params = load_params(&seg_path)?;
            for ((f, c), r) in files.iter().zip(&candidates).zip(references()?) {
                let seg = segment(&params, c, &r).map_err(|e| CliError::File {
                    path: f.clone(),
                    source: e.into(),
                })?;
                let d = segmap_to_decision(&seg, &cfg.experiment.supervised.decision)?;
                let stem = file_stem(f);
                save_map(&out.join("maps").join(format!("{stem}.png")), &seg.to_diff_map())?;
                save_mask(&out.join("masks").join(format!("{stem}_mask.png")), &d.mask)?;
                rows.push(Detection {
                    file: stem,
                    defective: d.defective,
                    score: d.max_prob,
                });
            }
        }
        Pipeline::Membank => {
            let bank_path = cfg
                .models
                .bank
                .clone()
                .ok_or_else(|| CliError::Usage("membank pipeline needs --bank (from build-bank)".into()))?;
            require_file(&bank_path)?;
            let bank: MemoryBank = load_bank(&bank_path).map_err(|e| CliError::File {
                path: bank_path.clone(),
                source: e.into(),
            })?;
            let cal_path = sidecar(&bank_path, "calibration.json");
            let cal: Option<BankCalibration> = if cal_path.exists() {
                Some(crate::config::read_json(&cal_path)?)
            } else {
                None
            };
            let threshold = a.threshold.or(cal.as_ref().map(|c| c.threshold)).ok_or_else(|| {
                CliError::Usage(format!("no --threshold and no calibration file {}", cal_path.display()))
            })?;
            let mc = &cfg.experiment.membank;
            let (layer, k, sigma) = match &cal {
                Some(c) => (c.layer_tag.clone(), c.k, c.map_sigma),
                None => (mc.layer_tag.clone(), mc.k, mc.map_sigma),
            };
            let bb_path = cfg
                .backbone_path()
                .ok_or_else(|| CliError::Usage("membank pipeline needs --backbone (or --inpainter)".into()))?
                .to_path_buf();
            let backbone = Backbone::new(load_params(&bb_path)?, &layer)?;
            if backbone.checkpoint_hash() != bank.backbone.checkpoint_hash {
                return Err(CliError::Usage(format!(
                    "bank was built with backbone {} but {} has hash {}",
                    bank.backbone.checkpoint_hash,
                    bb_path.display(),
                    backbone.checkpoint_hash()
                )));
            }
            for (f, c) in files.iter().zip(&candidates) {
                let attribute = |e: refsim_core::Error| CliError::File {
                    path: f.clone(),
                    source: e,
                };
                let grid = backbone.extract(c).map_err(|e| attribute(e.into()))?;
                let res = score_grid(&bank, &grid, k, sigma)?;
                let stem = file_stem(f);
                save_map(
                    &out.join("maps").join(format!("{stem}.png")),
                    &DiffMap::new(res.width, res.height, res.map.clone())?,
                )?;
                rows.push(Detection {
                    file: stem,
                    defective: classify(&res, threshold)?,
                    score: res.image_score,
                });
            }
        }
    }
    let mut csv = String::from("file,decision,score\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.file,
            if r.defective { "defective" } else { "nominal" },
            r.score
        ));
    }
    write_json(&out.join("detections.json"), &rows)?;
    write_file(&out.join("detections.csv"), csv.as_bytes())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let (started, clock) = (unix_now(), Instant::now());
    let mut cfg = a.common.run_config()?;
    a.models.apply(&mut cfg);
    if let Some(p) = a.pipeline {
        cfg.pipeline = Some(p.into());
    }
    if let Some(m) = a.ref_mode {
        cfg.ref_mode = Some(m.into());
    }
    if let Some(m) = a.simulate_mode {
        cfg.simulate_mode = Some(m.into());
    }
    if a.register {
        cfg.experiment.classic.register = true;
    }
    let pipeline = cfg
        .pipeline
        .ok_or_else(|| CliError::Usage("no pipeline given (--pipeline or \"pipeline\" in the config)".into()))?;
    let mode = cfg.ref_mode();
    cfg.ref_mode = Some(mode);
    let out = cfg.out_path()?.to_path_buf();
    let ds = cfg.load_dataset()?;

    let (inpainter, vae) = match mode {
        RefMode::Real => (None, None),
        RefMode::SimulatedInpaint => (cfg.generator(mode)?, None),
        RefMode::SimulatedVae => (None, cfg.generator(mode)?),
    };
    let backbone = match (pipeline, &cfg.models.features) {
        (Pipeline::Membank, None) => cfg.backbone_path().map(load_params).transpose()?,
        _ => None,
    };
    let features = match pipeline {
        Pipeline::Membank => cfg.features()?,
        _ => None,
    };
    let pre = Prerequisites {
        inpainter: inpainter.as_ref(),
        vae: vae.as_ref(),
        backbone: backbone.as_ref(),
        features: features.as_ref(),
    };
    let tag = format!("{}_{}", enum_str(&pipeline), enum_str(&mode));
    let mut exp = cfg.experiment.clone();
    exp.artifact_dir = Some(out.clone());
    let mut report = run_experiment(&ds, pipeline, mode, &exp, &pre)?;

    let mut snapshot = cfg.clone();
    snapshot.out = None;
    if let serde_json::Value::Object(map) = &mut report.config {
        map.insert("run".into(), serde_json::to_value(&snapshot).expect("serializable"));
    }
    write_report(&report, &out, &tag)?;
    write_json(&out.join(format!("{tag}.run.json")), &cfg)?;
    write_run_log(
        &out.join(format!("{tag}.log")),
        "evaluate",
        started,
        clock.elapsed().as_secs_f64(),
    )
}

fn enum_str<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn make_synth(a: MakeSynthArgs) -> Result<(), CliError> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => crate::config::read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.texture {
        cfg.texture = t.into();
    }
    if let Some(s) = a.size {
        cfg.width = s;
        cfg.height = s;
    }
    for (flag, field) in [
        (a.n_train, &mut cfg.n_train),
        (a.n_defective, &mut cfg.n_test_defective),
        (a.n_nominal, &mut cfg.n_test_nominal),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(d) = a.defect_delta {
        cfg.defect_delta = d;
    }
    if let Some(s) = a.ref_noise_sigma {
        cfg.ref_noise_sigma = s;
    }
    if let Some(m) = a.ref_misalign_px {
        cfg.ref_misalign_px = m;
    }
    // Validates the config even when only the JSON is written.
    let ds = refsim_core::eval::make_synthetic_dataset(&cfg)?;
    if a.out.extension().is_some_and(|e| e == "json") {
        return write_json(&a.out, &cfg);
    }
    save_dataset(&ds, &a.out)?;
    let summary: BTreeMap<&str, serde_json::Value> = [
        ("name", serde_json::json!(ds.name)),
        ("content_hash", serde_json::json!(ds.content_hash())),
    ]
    .into();
    write_json(&a.out.join("synth.json"), &cfg)?;
    write_json(&a.out.join("dataset.json"), &summary)
}
