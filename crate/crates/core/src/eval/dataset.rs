use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::Label;
use super::EvalError;
use crate::imagecore::texture::{Texture, TextureKind};
use crate::imagecore::{
    inject_defect, load_image, save_image, save_mask_png, BitDepth, DefectShape, DefectSpec, DetectionMask, Image,
};
use crate::util::{mix_seed, sha256_hex};

#[derive(Debug, Clone, PartialEq)]
pub struct TestItem {
    pub id: String,
    /// Defect category directory (`good` for nominal items).
    pub category: String,
    pub candidate: Image,
    pub real_reference: Option<Image>,
    pub truth: Option<DetectionMask>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train_nominal: Vec<Image>,
    /// File stems of `train_nominal`, parallel to it.
    pub train_ids: Vec<String>,
    /// Independently acquired reference image per training image, parallel to
    /// `train_nominal`; the real-reference memory bank is built from these.
    pub train_references: Option<Vec<Image>>,
    pub test_items: Vec<TestItem>,
}

impl Dataset {
    /// Checks shapes, label/mask consistency and non-empty splits.
    pub fn validate(&self) -> Result<(), EvalError> {
        let first = self
            .train_nominal
            .first()
            .ok_or_else(|| EvalError::InvalidDataset("no nominal training images".into()))?;
        let shape = first.shape();
        let bad = |what: String| Err(EvalError::InvalidDataset(what));
        if self.train_ids.len() != self.train_nominal.len() {
            return bad("train_ids and train_nominal differ in length".into());
        }
        if self.train_nominal.iter().any(|i| i.shape() != shape) {
            return bad("training images differ in shape".into());
        }
        if let Some(refs) = &self.train_references {
            if refs.len() != self.train_nominal.len() {
                return bad("train_references and train_nominal differ in length".into());
            }
            if refs.iter().any(|i| i.shape() != shape) {
                return bad("training references differ in shape".into());
            }
        }
        if self.test_items.is_empty() {
            return bad("no test items".into());
        }
        for item in &self.test_items {
            if item.candidate.shape() != shape {
                return bad(format!(
                    "{}: shape {:?} differs from {:?}",
                    item.id,
                    item.candidate.shape(),
                    shape
                ));
            }
            if let Some(r) = &item.real_reference {
                if r.shape() != shape {
                    return bad(format!(
                        "{}: reference shape {:?} differs from {:?}",
                        item.id,
                        r.shape(),
                        shape
                    ));
                }
            }
            if let Some(t) = &item.truth {
                if (t.width(), t.height()) != (shape.0, shape.1) {
                    return bad(format!("{}: mask is {}x{}", item.id, t.width(), t.height()));
                }
                match item.label {
                    Label::Defective if t.is_empty() => {
                        return bad(format!("{}: defective item with an empty mask", item.id))
                    }
                    Label::Nominal if !t.is_empty() => {
                        return bad(format!("{}: nominal item with a non-empty mask", item.id))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.train_nominal[0].shape()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.test_items.iter().map(|i| i.label).collect()
    }

    /// SHA-256 over every image, reference and mask in order.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        let mut push = |img: &Image| {
            for d in [img.width(), img.height(), img.channels()] {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in img.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        for img in &self.train_nominal {
            push(img);
        }
        for img in self.train_references.iter().flatten() {
            push(img);
        }
        for item in &self.test_items {
            push(&item.candidate);
            if let Some(r) = &item.real_reference {
                push(r);
            }
            if let Some(t) = &item.truth {
                push(&t.to_image());
            }
        }
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Defects add `+defect_delta`.
    #[default]
    Bright,
    /// Defects add `-defect_delta`.
    Dark,
    /// Sign drawn per item.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test_defective: usize,
    pub n_test_nominal: usize,
    pub texture: TextureKind,
    pub width: usize,
    pub height: usize,
    pub defect_shape: DefectShape,
    pub defect_size: u32,
    pub defect_delta: f64,
    pub polarity: Polarity,
    pub ref_noise_sigma: f64,
    pub ref_misalign_px: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test_defective: 20,
            n_test_nominal: 20,
            texture: TextureKind::Stripes,
            width: 128,
            height: 128,
            defect_shape: DefectShape::Disc,
            defect_size: 6,
            defect_delta: 0.4,
            polarity: Polarity::Bright,
            ref_noise_sigma: 0.1,
            ref_misalign_px: 3,
            seed: 0,
        }
    }
}

/// Offset range for texture rendering; covers several periods of every family.
const OFFSET_SPAN: f64 = 64.0;

struct Renderer<'a> {
    cfg: &'a SyntheticConfig,
    /// Shared texture for the periodic families.
    shared: Option<Texture>,
}

impl Renderer<'_> {
    /// A texture and render offset for one image, from its own stream.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Texture, (f64, f64)) {
        let tex = match &self.shared {
            Some(t) => t.clone(),
            None => Texture::sample(self.cfg.texture, self.cfg.width, self.cfg.height, rng),
        };
        let offset = (rng.random_range(0.0..OFFSET_SPAN), rng.random_range(0.0..OFFSET_SPAN));
        (tex, offset)
    }

    fn render(&self, tex: &Texture, offset: (f64, f64)) -> Image {
        tex.render(self.cfg.width, self.cfg.height, offset)
    }

    /// Independent rendering of the same texture shifted by up to
    /// `ref_misalign_px` per axis, plus Gaussian noise.
    fn real_reference(&self, tex: &Texture, offset: (f64, f64), rng: &mut ChaCha8Rng) -> Image {
        let m = self.cfg.ref_misalign_px as i64;
        let (dx, dy) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        let clean = self.render(tex, (offset.0 + dx as f64, offset.1 + dy as f64));
        if self.cfg.ref_noise_sigma == 0.0 {
            return clean;
        }
        let noise = Normal::new(0.0, self.cfg.ref_noise_sigma).expect("validated sigma");
        let data = clean.data().iter().map(|v| v + noise.sample(rng)).collect();
        Image::from_clamped(self.cfg.width, self.cfg.height, 1, data).expect("noisy reference")
    }
}

pub fn make_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset, EvalError> {
    let invalid = |m: String| Err(EvalError::InvalidConfig(m));
    if cfg.n_train == 0 || cfg.n_test_defective == 0 || cfg.n_test_nominal == 0 {
        return invalid("n_train, n_test_defective and n_test_nominal must be >= 1".into());
    }
    if cfg.width == 0 || cfg.height == 0 {
        return invalid("image dims must be nonzero".into());
    }
    if !(cfg.ref_noise_sigma >= 0.0 && cfg.ref_noise_sigma.is_finite()) {
        return invalid(format!("ref_noise_sigma {} must be >= 0", cfg.ref_noise_sigma));
    }
    if !(0.0..=1.0).contains(&cfg.defect_delta) {
        return invalid(format!("defect_delta {} not in [0, 1]", cfg.defect_delta));
    }
    let probe = DefectSpec {
        shape: cfg.defect_shape,
        center: (0, 0),
        size: cfg.defect_size,
        intensity_delta: 0.0,
        seed: 0,
    };
    let extent = probe.extent();
    if 2 * extent + 1 > cfg.width.min(cfg.height) as i64 {
        return invalid(format!(
            "defect of extent {extent} does not fit a {}x{} image",
            cfg.width, cfg.height
        ));
    }

    let shared = match cfg.texture {
        TextureKind::Blobs => None,
        kind => Some(Texture::sample(
            kind,
            cfg.width,
            cfg.height,
            &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1)),
        )),
    };
    let r = Renderer { cfg, shared };
    let stream = |kind: u64, i: usize| ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (kind << 32) | i as u64));

    let (train_nominal, train_references) = (0..cfg.n_train)
        .map(|i| {
            let (tex, off) = r.sample(&mut stream(2, i));
            (r.render(&tex, off), r.real_reference(&tex, off, &mut stream(5, i)))
        })
        .unzip();

    let mut test_items = Vec::with_capacity(cfg.n_test_defective + cfg.n_test_nominal);
    for i in 0..cfg.n_test_defective {
        let mut rng = stream(3, i);
        let (tex, off) = r.sample(&mut rng);
        let clean = r.render(&tex, off);
        let sign = match cfg.polarity {
            Polarity::Bright => 1.0,
            Polarity::Dark => -1.0,
            Polarity::Mixed => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        let spec = DefectSpec {
            center: (
                rng.random_range(extent..cfg.width as i64 - extent),
                rng.random_range(extent..cfg.height as i64 - extent),
            ),
            intensity_delta: sign * cfg.defect_delta,
            seed: rng.random(),
            ..probe
        };
        let (candidate, truth) = inject_defect(&clean, &spec)?;
        let real_reference = Some(r.real_reference(&tex, off, &mut rng));
        test_items.push(TestItem {
            id: format!("defect_{i:03}"),
            category: "defect".into(),
            candidate,
            real_reference,
            truth: Some(truth),
            label: Label::Defective,
        });
    }
    for i in 0..cfg.n_test_nominal {
        let mut rng = stream(4, i);
        let (tex, off) = r.sample(&mut rng);
        let candidate = r.render(&tex, off);
        let real_reference = Some(r.real_reference(&tex, off, &mut rng));
        test_items.push(TestItem {
            id: format!("good_{i:03}"),
            category: "good".into(),
            truth: Some(DetectionMask::empty(cfg.width, cfg.height)),
            candidate,
            real_reference,
            label: Label::Nominal,
        });
    }
    let ds = Dataset {
        train_ids: (0..cfg.n_train).map(|i| format!("{i:03}")).collect(),
        train_references: Some(train_references),
        name: format!(
            "synthetic-{}-seed{}",
            serde_json::to_value(cfg.texture).unwrap().as_str().unwrap(),
            cfg.seed
        ),
        train_nominal,
        test_items,
    };
    ds.validate()?;
    Ok(ds)
}

/// Optional conversions applied while loading an MVTec-style tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MvtecOptions {
    /// Resample every image and mask to `(width, height)`.
    pub resize: Option<(usize, usize)>,
    pub grayscale: bool,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let entries = std::fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| EvalError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let entries = std::fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn require_dir(path: PathBuf) -> Result<PathBuf, EvalError> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(EvalError::MissingDir(path))
    }
}

fn convert(img: Image, opts: &MvtecOptions) -> Result<Image, EvalError> {
    let img = if opts.grayscale { img.to_gray() } else { img };
    Ok(match opts.resize {
        Some((w, h)) if (w, h) != (img.width(), img.height()) => img.resize(w, h)?,
        _ => img,
    })
}

/// Reference subdirectory holding one real reference per training image.
const TRAIN_REF_DIR: &str = "_train";

/// Loads `train/good`, `test/<category>` and `ground_truth/<category>/<stem>_mask.png`.
/// An optional `reference/<category>/<stem>.png` tree supplies real references,
/// and `reference/_train/<stem>.png` one per training image.
pub fn load_mvtec(root: &Path, opts: &MvtecOptions) -> Result<Dataset, EvalError> {
    let train_dir = require_dir(root.join("train").join("good"))?;
    let test_dir = require_dir(root.join("test"))?;
    let ref_root = root.join("reference");
    let train_files = png_files(&train_dir)?;
    if train_files.is_empty() {
        return Err(EvalError::EmptyTrain(train_dir));
    }
    let train_nominal = train_files
        .iter()
        .map(|p| convert(load_image(p)?, opts))
        .collect::<Result<Vec<_>, _>>()?;

    let train_ref_dir = root.join("reference").join(TRAIN_REF_DIR);
    let train_references = if train_ref_dir.is_dir() {
        let refs = train_files
            .iter()
            .map(|p| {
                let path = train_ref_dir.join(p.file_name().expect("png file"));
                if !path.is_file() {
                    return Err(EvalError::InvalidDataset(format!(
                        "{} exists but lacks {}",
                        train_ref_dir.display(),
                        path.display()
                    )));
                }
                convert(load_image(&path)?, opts)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(refs)
    } else {
        None
    };

    let mut test_items = Vec::new();
    for cat_dir in subdirs(&test_dir)? {
        let category = cat_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let nominal = category == "good";
        for file in png_files(&cat_dir)? {
            let s = stem(&file);
            let candidate = convert(load_image(&file)?, opts)?;
            let truth = if nominal {
                None
            } else {
                let mask_path = root.join("ground_truth").join(&category).join(format!("{s}_mask.png"));
                if !mask_path.is_file() {
                    return Err(EvalError::MissingMask {
                        stem: s,
                        path: mask_path,
                    });
                }
                let mask = convert(load_image(&mask_path)?, opts)?;
                Some(DetectionMask::from_image(&mask)?)
            };
            let ref_path = ref_root.join(&category).join(format!("{s}.png"));
            let real_reference = if ref_path.is_file() {
                Some(convert(load_image(&ref_path)?, opts)?)
            } else {
                None
            };
            test_items.push(TestItem {
                id: format!("{category}/{s}"),
                category: category.clone(),
                candidate,
                real_reference,
                truth,
                label: if nominal { Label::Nominal } else { Label::Defective },
            });
        }
    }
    let name = root.file_name().and_then(|s| s.to_str()).unwrap_or("mvtec").to_string();
    let ds = Dataset {
        name,
        train_ids: train_files.iter().map(|p| stem(p)).collect(),
        train_references,
        train_nominal,
        test_items,
    };
    ds.validate()?;
    Ok(ds)
}

/// A `.json` file holds a [`SyntheticConfig`]; a directory is an MVTec-style tree.
pub fn load_dataset(path: &Path, opts: &MvtecOptions) -> Result<Dataset, EvalError> {
    if !path.exists() {
        return Err(EvalError::MissingPath(path.to_path_buf()));
    }
    if path.is_dir() {
        return load_mvtec(path, opts);
    }
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: SyntheticConfig =
        serde_json::from_str(&text).map_err(|e| EvalError::InvalidConfig(format!("{}: {e}", path.display())))?;
    make_synthetic_dataset(&cfg)
}

/// Writes the dataset as an MVTec-style tree (16-bit PNGs) plus a
/// `reference/` tree for items that carry a real reference.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<(), EvalError> {
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|source| EvalError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let train = root.join("train").join("good");
    mkdir(&train)?;
    for (id, img) in ds.train_ids.iter().zip(&ds.train_nominal) {
        save_image(train.join(format!("{id}.png")), img, BitDepth::Sixteen)?;
    }
    if let Some(refs) = &ds.train_references {
        let dir = root.join("reference").join(TRAIN_REF_DIR);
        mkdir(&dir)?;
        for (id, img) in ds.train_ids.iter().zip(refs) {
            save_image(dir.join(format!("{id}.png")), img, BitDepth::Sixteen)?;
        }
    }
    for item in &ds.test_items {
        let s = item.id.rsplit('/').next().unwrap_or(&item.id);
        let dir = root.join("test").join(&item.category);
        mkdir(&dir)?;
        save_image(dir.join(format!("{s}.png")), &item.candidate, BitDepth::Sixteen)?;
        if item.label == Label::Defective {
            if let Some(t) = &item.truth {
                let gt = root.join("ground_truth").join(&item.category);
                mkdir(&gt)?;
                save_mask_png(gt.join(format!("{s}_mask.png")), t)?;
            }
        }
        if let Some(r) = &item.real_reference {
            let rd = root.join("reference").join(&item.category);
            mkdir(&rd)?;
            save_image(rd.join(format!("{s}.png")), r, BitDepth::Sixteen)?;
        }
    }
    Ok(())
}
