use std::path::{Path, PathBuf};

use refsim_core::eval::{Dataset, ExperimentConfig, ImportedFeatures, MvtecOptions, Pipeline, RefMode};
use refsim_core::generative::{Generator, InpaintConfig, SimulateMode, VaeConfig};
use refsim_core::membank::load_feature_grids;
use refsim_core::nncore::{load_checkpoint, ModelParams};
use refsim_core::segmenter::SegmenterConfig;
use refsim_core::util::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub inpainter: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    /// Encoder for the memory bank; falls back to `inpainter`.
    pub backbone: Option<PathBuf>,
    /// Feature grids in the RSFG format; replace the backbone when set.
    pub features: Option<PathBuf>,
    pub segmenter: Option<PathBuf>,
    pub bank: Option<PathBuf>,
}

/// One JSON document describing a run. Flags override fields; the saved
/// snapshot reproduces the run when passed back with `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// A synthetic-dataset JSON file or an MVTec-style directory.
    pub data: Option<PathBuf>,
    pub mvtec: MvtecOptions,
    pub pipeline: Option<Pipeline>,
    pub ref_mode: Option<RefMode>,
    pub simulate_mode: Option<SimulateMode>,
    pub models: ModelPaths,
    pub inpaint: InpaintConfig,
    pub vae: VaeConfig,
    pub segmenter: SegmenterConfig,
    pub experiment: ExperimentConfig,
    /// Overrides every module seed when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingPath(path.to_path_buf()),
        _ => CliError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }

    /// Pushes the top-level seed into every module config.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.inpaint.seed = s;
            self.vae.seed = s;
            self.segmenter.seed = s;
            self.experiment.seed = s;
        }
    }

    pub fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Usage("no dataset given (--data or \"data\" in the config)".into()))
    }

    pub fn out_path(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output path given (--out or \"out\" in the config)".into()))
    }

    pub fn ref_mode(&self) -> RefMode {
        self.ref_mode.unwrap_or(RefMode::Real)
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        load_dataset(self.data_path()?, &self.mvtec)
    }

    pub fn generator(&self, mode: RefMode) -> Result<Option<Generator>, CliError> {
        let path = match mode {
            RefMode::Real => return Ok(None),
            RefMode::SimulatedInpaint => self.models.inpainter.as_deref().ok_or_else(|| {
                CliError::Usage(
                    "ref mode simulated-inpaint needs --inpainter (from train-generator --kind inpaint)".into(),
                )
            })?,
            RefMode::SimulatedVae => self.models.vae.as_deref().ok_or_else(|| {
                CliError::Usage("ref mode simulated-vae needs --vae (from train-generator --kind vae)".into())
            })?,
        };
        let mut g = load_generator(path)?;
        if let Some(m) = self.simulate_mode {
            g.set_mode(m);
        }
        Ok(Some(g))
    }

    pub fn backbone_path(&self) -> Option<&Path> {
        self.models.backbone.as_deref().or(self.models.inpainter.as_deref())
    }

    pub fn features(&self) -> Result<Option<ImportedFeatures>, CliError> {
        self.models.features.as_deref().map(load_imported).transpose()
    }
}

pub fn load_dataset(path: &Path, opts: &MvtecOptions) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::MissingPath(path.to_path_buf()));
    }
    Ok(refsim_core::eval::load_dataset(path, opts)?)
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingPath(path.to_path_buf()))
    }
}

pub fn load_params(path: &Path) -> Result<ModelParams, CliError> {
    require_file(path)?;
    load_checkpoint(path).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

pub fn load_generator(path: &Path) -> Result<Generator, CliError> {
    Generator::new(load_params(path)?).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

pub fn load_imported(path: &Path) -> Result<ImportedFeatures, CliError> {
    require_file(path)?;
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let grids = load_feature_grids(path).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    Ok(ImportedFeatures {
        source: sha256_hex(&bytes),
        grids: grids.into_iter().map(|g| (g.name, g.grid)).collect(),
    })
}
