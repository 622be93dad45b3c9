//! Python bindings: synthetic data, gradient checks, training on the
//! synthetic task, checkpoint loading, prediction and mask metrics.
//! Images cross the boundary as nested lists of floats (rows of columns).

use std::path::PathBuf;

use pemf_core::checkpoint::Checkpoint;
use pemf_core::data::{load_dataset, synth_generate, write_flat, Layout, SynthConfig};
use pemf_core::gradcheck::{run as run_gradcheck, Options, Scope};
use pemf_core::metrics::{confusion, dsc, iou, se, sp};
use pemf_core::trainer::{self, AdamConfig};
use pemf_core::{Error, NetworkConfig, Tensor, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Invalid(_) | Error::Checkpoint(_) | Error::Shape { .. } => {
            PyValueError::new_err(msg)
        }
        Error::Data { .. } | Error::Io { .. } => PyOSError::new_err(msg),
        Error::NonFinite { .. } | Error::Diverged(_) => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn plane_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Tensor::new(vec![1, h, w], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows_from_plane(t: &Tensor) -> Vec<Vec<f64>> {
    let w = *t.shape().last().expect("rank >= 1");
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// Synthetic speckled samples as dicts with `id`, `class`, `image`, `mask`.
#[pyfunction]
#[pyo3(signature = (count=80, size=64, seed=0, noise_level=0.4))]
fn synth<'py>(py: Python<'py>, count: usize, size: usize, seed: u64, noise_level: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let samples = synth_generate(&SynthConfig {
        count,
        size,
        seed,
        noise_level,
    })
    .map_err(to_py)?;
    samples
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("id", &s.id)?;
            d.set_item("class", s.class.as_str())?;
            d.set_item("image", rows_from_plane(&s.image))?;
            d.set_item("mask", rows_from_plane(&s.mask))?;
            Ok(d)
        })
        .collect()
}

/// Writes a synthetic dataset in the flat layout and returns the count.
#[pyfunction]
#[pyo3(signature = (out_dir, count=80, size=64, seed=0, noise_level=0.4))]
fn write_synth(out_dir: PathBuf, count: usize, size: usize, seed: u64, noise_level: f64) -> PyResult<usize> {
    let samples = synth_generate(&SynthConfig {
        count,
        size,
        seed,
        noise_level,
    })
    .map_err(to_py)?;
    write_flat(&out_dir, &samples).map_err(to_py)?;
    Ok(samples.len())
}

/// Runs one finite-difference suite; one dict per case.
#[pyfunction]
#[pyo3(signature = (scope="ops", seed=0, perturb=None))]
fn gradcheck<'py>(py: Python<'py>, scope: &str, seed: u64, perturb: Option<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let scope: Scope = scope.parse().map_err(to_py)?;
    let results = run_gradcheck(scope, &Options { seed, perturb }).map_err(to_py)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("worst_input", &r.worst.0)?;
            d.set_item("worst_index", r.worst.1)?;
            d.set_item("entries", r.entries)?;
            d.set_item("skipped", r.skipped)?;
            d.set_item("passed", r.passed())?;
            Ok(d)
        })
        .collect()
}

/// DSC, IoU, SE and SP of two binary masks.
#[pyfunction]
fn mask_metrics<'py>(py: Python<'py>, pred: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let c = confusion(&plane_from_rows(pred)?, &plane_from_rows(truth)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("tp", c.tp)?;
    d.set_item("fp", c.fp)?;
    d.set_item("fn", c.fn_)?;
    d.set_item("tn", c.tn)?;
    d.set_item("dsc", dsc(&c))?;
    d.set_item("iou", iou(&c))?;
    d.set_item("se", se(&c))?;
    d.set_item("sp", sp(&c))?;
    Ok(d)
}

/// A trained network loaded from a checkpoint.
#[pyclass(module = "pemf")]
struct Model {
    checkpoint: Checkpoint,
    model: pemf_core::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = Checkpoint::load(&path).map_err(to_py)?;
        let model = checkpoint.model().map_err(to_py)?;
        Ok(Self { checkpoint, model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(to_py)
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.checkpoint.meta.input_size
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.checkpoint.meta.epoch
    }

    /// Binary mask (0/1) at the image's own resolution.
    #[pyo3(signature = (image, threshold=0.5))]
    fn predict(&mut self, image: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<Vec<f64>>> {
        let image = plane_from_rows(image)?;
        let size = self.checkpoint.meta.input_size;
        let mask = trainer::predict_image_mask(&mut self.model, size, &image, threshold).map_err(to_py)?;
        Ok(rows_from_plane(&mask))
    }

    /// Mean metrics over a dataset directory.
    #[pyo3(signature = (data_dir, layout="flat"))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, layout: &str) -> PyResult<Bound<'py, PyDict>> {
        let layout: Layout = layout.parse().map_err(to_py)?;
        let samples = load_dataset(&data_dir, layout)
            .and_then(|s| {
                s.iter()
                    .map(|x| pemf_core::data::preprocess(x, self.checkpoint.meta.input_size))
                    .collect::<Result<Vec<_>, _>>()
            })
            .map_err(to_py)?;
        let report = trainer::evaluate(&self.checkpoint, &samples).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("images", report.records.len())?;
        if let Some(g) = report.overall() {
            d.set_item("dsc", g.dsc.mean)?;
            d.set_item("iou", g.iou.mean)?;
            d.set_item("se", g.se.mean)?;
            d.set_item("sp", g.sp.mean)?;
        }
        Ok(d)
    }
}

/// Trains on a synthetic dataset held out 75/25 and returns the loss
/// history and final held-out DSC. Saves the last checkpoint when
/// `checkpoint` is given.
#[pyfunction]
#[pyo3(signature = (
    epochs=10, seed=0, count=80, size=64, depth=3, base_channels=8, pcam_paths=4,
    lr=1e-3, batch_size=4, lambda_tv=1e-3, checkpoint=None
))]
#[allow(clippy::too_many_arguments)]
fn train_synthetic<'py>(
    py: Python<'py>,
    epochs: usize,
    seed: u64,
    count: usize,
    size: usize,
    depth: usize,
    base_channels: usize,
    pcam_paths: usize,
    lr: f64,
    batch_size: usize,
    lambda_tv: f64,
    checkpoint: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = synth_generate(&SynthConfig {
        count,
        size,
        seed,
        ..SynthConfig::default()
    })
    .map_err(to_py)?;
    let n_test = count / 4;
    let (train_set, test_set) = data.split_at(count - n_test);
    let network = NetworkConfig {
        depth,
        base_channels,
        pcam_paths,
        ..NetworkConfig::desk()
    };
    let mut cfg = TrainConfig {
        epochs,
        batch_size,
        seed,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.loss.weights.lambda_tv = lambda_tv;
    let outcome = py
        .detach(|| trainer::train(network, train_set, test_set, cfg))
        .map_err(to_py)?;
    if let Some(path) = checkpoint {
        outcome.last.save(&path).map_err(to_py)?;
    }
    let history: Vec<(usize, f64, f64, f64, f64)> = outcome
        .history
        .iter()
        .map(|r| (r.epoch, r.loss, r.bce, r.tv, r.dice))
        .collect();
    let d = PyDict::new(py);
    d.set_item("history", history)?;
    d.set_item(
        "held_out_dsc",
        outcome.evaluations.last().map(|(_, r)| r.mean_dsc()),
    )?;
    d.set_item("halted", outcome.halted)?;
    Ok(d)
}

#[pymodule]
pub fn pemf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(write_synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(mask_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
