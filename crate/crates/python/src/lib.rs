use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use refsim_core::eval::{
    self, load_dataset, make_synthetic_dataset, run_experiment, save_dataset, Confusion, EvalError, ExperimentConfig,
    ImportedFeatures, Label, MvtecOptions, Pipeline, Prerequisites, RefMode, SyntheticConfig,
};
use refsim_core::generative::{self, Generator, InpaintConfig, VaeConfig};
use refsim_core::imagecore::Image;
use refsim_core::membank::{load_feature_grids, save_feature_grids, FeatureGrid, NamedGrid};
use refsim_core::nncore::{load_checkpoint, save_checkpoint};
use refsim_core::util::sha256_hex;
use refsim_core::Error;

/// `(name, gh, gw, dim, values, image_width, image_height)`; values row-major over cells.
type GridTuple = (String, usize, usize, usize, Vec<f64>, usize, usize);

fn py_err(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    let msg = e.to_string();
    match &e {
        Error::Image(_) | Error::Eval(EvalError::Io { .. } | EvalError::MissingPath(_) | EvalError::MissingDir(_)) => {
            PyIOError::new_err(msg)
        }
        Error::Eval(EvalError::InvalidConfig(_) | EvalError::MissingPrerequisite(_)) => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(
        || Ok(T::default()),
        |j| serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string())),
    )
}

fn enum_from<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {value:?}")))
}

fn confusion(decisions: Vec<bool>, defective: Vec<bool>) -> PyResult<Confusion> {
    let labels: Vec<Label> = defective
        .into_iter()
        .map(|d| if d { Label::Defective } else { Label::Nominal })
        .collect();
    Confusion::from_decisions(&decisions, &labels).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Fraction of defective items flagged defective.
#[pyfunction]
fn capture_rate(decisions: Vec<bool>, defective: Vec<bool>) -> PyResult<f64> {
    confusion(decisions, defective)?
        .capture_rate()
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Fraction of nominal items left unflagged.
#[pyfunction]
fn filter_rate(decisions: Vec<bool>, defective: Vec<bool>) -> PyResult<f64> {
    confusion(decisions, defective)?
        .filter_rate()
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn f_score(decisions: Vec<bool>, defective: Vec<bool>) -> PyResult<f64> {
    confusion(decisions, defective)?
        .f_score()
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Writes a synthetic dataset as an MVTec-style tree; returns its content hash.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn make_synthetic(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg: SyntheticConfig = parse(config_json)?;
    let ds = make_synthetic_dataset(&cfg).map_err(py_err)?;
    save_dataset(&ds, &out_dir).map_err(py_err)?;
    Ok(ds.content_hash())
}

/// Trains a generator (`"inpaint"` or `"vae"`) on a dataset's nominal split;
/// returns the training report as JSON.
#[pyfunction]
#[pyo3(signature = (kind, data, out, config_json=None))]
fn train_generator(
    py: Python<'_>,
    kind: &str,
    data: PathBuf,
    out: PathBuf,
    config_json: Option<&str>,
) -> PyResult<String> {
    let ds = load_dataset(&data, &MvtecOptions::default()).map_err(py_err)?;
    let (params, report) = match kind {
        "inpaint" => {
            let cfg: InpaintConfig = parse(config_json)?;
            py.detach(|| generative::train_inpainter(&ds.train_nominal, &cfg))
                .map_err(py_err)?
        }
        "vae" => {
            let cfg: VaeConfig = parse(config_json)?;
            py.detach(|| generative::train_vae(&ds.train_nominal, &cfg))
                .map_err(py_err)?
        }
        other => return Err(PyValueError::new_err(format!("unknown generator kind {other:?}"))),
    };
    save_checkpoint(&params, &out).map_err(py_err)?;
    Ok(serde_json::to_string(&report).expect("serializable"))
}

/// Simulated reference for one image given as row-major interleaved floats in [0, 1].
#[pyfunction]
#[pyo3(signature = (checkpoint, pixels, width, height, channels=1))]
fn simulate(checkpoint: PathBuf, pixels: Vec<f64>, width: usize, height: usize, channels: usize) -> PyResult<Vec<f64>> {
    let g = Generator::new(load_checkpoint(&checkpoint).map_err(py_err)?).map_err(py_err)?;
    let img = Image::new(width, height, channels, pixels).map_err(py_err)?;
    Ok(g.simulate(&img).map_err(py_err)?.image.into_data())
}

/// Writes feature grids in the RSFG format read by `evaluate(features=...)`.
#[pyfunction]
fn write_feature_grids(path: PathBuf, grids: Vec<GridTuple>) -> PyResult<()> {
    let named = grids
        .into_iter()
        .map(|(name, gh, gw, dim, values, iw, ih)| {
            Ok(NamedGrid {
                name,
                grid: FeatureGrid::new(gh, gw, dim, values, iw, ih).map_err(py_err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    save_feature_grids(&path, &named).map_err(py_err)
}

#[pyfunction]
fn read_feature_grids(path: PathBuf) -> PyResult<Vec<GridTuple>> {
    Ok(load_feature_grids(&path)
        .map_err(py_err)?
        .into_iter()
        .map(|n| {
            let g = n.grid;
            (n.name, g.gh, g.gw, g.dim, g.vectors, g.image_width, g.image_height)
        })
        .collect())
}

/// Runs one pipeline and reference mode over a dataset; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (data, pipeline, ref_mode="real", inpainter=None, vae=None, backbone=None, features=None, config_json=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    data: PathBuf,
    pipeline: &str,
    ref_mode: &str,
    inpainter: Option<PathBuf>,
    vae: Option<PathBuf>,
    backbone: Option<PathBuf>,
    features: Option<PathBuf>,
    config_json: Option<&str>,
) -> PyResult<String> {
    let pipeline: Pipeline = enum_from("pipeline", pipeline)?;
    let mode: RefMode = enum_from("ref mode", ref_mode)?;
    let cfg: ExperimentConfig = parse(config_json)?;
    let ds = load_dataset(&data, &MvtecOptions::default()).map_err(py_err)?;
    let generator = |p: Option<PathBuf>| -> PyResult<Option<Generator>> {
        p.map(|p| Generator::new(load_checkpoint(&p).map_err(py_err)?).map_err(py_err))
            .transpose()
    };
    let (inpainter, vae) = (generator(inpainter)?, generator(vae)?);
    let backbone = backbone.map(|p| load_checkpoint(&p).map_err(py_err)).transpose()?;
    let features = features
        .map(|p| -> PyResult<ImportedFeatures> {
            let bytes = std::fs::read(&p).map_err(|e| PyIOError::new_err(format!("{}: {e}", p.display())))?;
            let grids = load_feature_grids(&p).map_err(py_err)?;
            Ok(ImportedFeatures {
                source: sha256_hex(&bytes),
                grids: grids.into_iter().map(|n| (n.name, n.grid)).collect(),
            })
        })
        .transpose()?;
    let pre = Prerequisites {
        inpainter: inpainter.as_ref(),
        vae: vae.as_ref(),
        backbone: backbone.as_ref().or(inpainter.as_ref().map(|g| g.params())),
        features: features.as_ref(),
    };
    let report = py
        .detach(|| run_experiment(&ds, pipeline, mode, &cfg, &pre))
        .map_err(py_err)?;
    Ok(report.to_json())
}

#[pymodule]
fn refsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SEGMENTER_ARCH", refsim_core::segmenter::SEGMENTER_ARCH)?;
    m.add("CHECKPOINT_VERSION", refsim_core::nncore::CHECKPOINT_VERSION)?;
    m.add(
        "DEFAULT_CONFIG",
        serde_json::to_string(&eval::ExperimentConfig::default()).expect("serializable"),
    )?;
    m.add_function(wrap_pyfunction!(capture_rate, m)?)?;
    m.add_function(wrap_pyfunction!(filter_rate, m)?)?;
    m.add_function(wrap_pyfunction!(f_score, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train_generator, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(write_feature_grids, m)?)?;
    m.add_function(wrap_pyfunction!(read_feature_grids, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
