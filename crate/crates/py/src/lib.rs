//! Python bindings for the two-branch occlusion-adaptive classifier.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use oadn_core::config::parse_kv;
use oadn_core::gradcheck::op_suite;
use oadn_core::landmark::{FlipTable, PointMapping};
use oadn_core::model::{
    load_model, predict, save_checkpoint, OadnConfig, OadnParams, RegionConfig,
};
use oadn_core::synth::{generate_dataset, load_dataset, save_dataset, DatasetConfig};
use oadn_core::train::{evaluate, manifest_for_run, train, Branch, TrainConfig};
use oadn_core::{OadnError, Tensor as CoreTensor};

fn err(e: OadnError) -> PyErr {
    match e {
        OadnError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense row-major tensor of f64 values.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: CoreTensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// conv2d(input, kernel, stride, padding): cross-correlation over [c,h,w].
#[pyfunction]
#[pyo3(signature = (input, kernel, stride=1, padding=0))]
fn conv2d(input: &PyTensor, kernel: &PyTensor, stride: usize, padding: usize) -> PyResult<PyTensor> {
    let mut tape = oadn_core::Tape::new();
    let x = tape.leaf(input.inner.clone(), false);
    let k = tape.leaf(kernel.inner.clone(), false);
    let y = tape.conv2d(x, k, stride, padding).map_err(err)?;
    Ok(PyTensor {
        inner: tape.value(y).clone(),
    })
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    let mut tape = oadn_core::Tape::new();
    let t = CoreTensor::new(vec![logits.len()], logits).map_err(err)?;
    let x = tape.leaf(t, false);
    let y = tape.softmax(x).map_err(err)?;
    Ok(tape.value(y).data().to_vec())
}

#[pyfunction]
fn cross_entropy(probs: Vec<f64>, label: usize) -> PyResult<f64> {
    let mut tape = oadn_core::Tape::new();
    let t = CoreTensor::new(vec![probs.len()], probs).map_err(err)?;
    let x = tape.leaf(t, false);
    let y = tape.cross_entropy(x, label).map_err(err)?;
    Ok(tape.value(y).item())
}

/// Finite-difference verification of every differentiable op. Returns a list
/// of {name, max_rel_err, cases} dicts.
#[pyfunction]
#[pyo3(signature = (eps=1e-5, seeds=5))]
fn gradcheck(py: Python<'_>, eps: f64, seeds: usize) -> PyResult<Vec<Py<PyDict>>> {
    op_suite(eps, seeds)
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("max_rel_err", r.max_rel_err)?;
            d.set_item("cases", r.cases)?;
            Ok(d.unbind())
        })
        .collect()
}

/// Writes a synthetic dataset to `out`.
#[pyfunction]
#[pyo3(signature = (out, seed=7, train_per_class=200, test_per_class=50,
                    occlude_train=0.0, occlude_test=1.0, image_size=64))]
#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: PathBuf,
    seed: u64,
    train_per_class: usize,
    test_per_class: usize,
    occlude_train: f64,
    occlude_test: f64,
    image_size: usize,
) -> PyResult<(usize, usize)> {
    let cfg = DatasetConfig {
        seed,
        train_per_class,
        test_per_class,
        occlude_train,
        occlude_test,
        image_size,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&cfg).map_err(err)?;
    save_dataset(&ds, &out).map_err(err)?;
    Ok((ds.train.len(), ds.test.len()))
}

/// The two-branch classifier: a landmark-gated attention branch plus
/// independent per-region heads over a shared convolutional trunk.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: OadnConfig,
    params: Option<OadnParams>,
}

fn parse_regions(s: &str) -> PyResult<RegionConfig> {
    let (m, n) = s
        .split_once('x')
        .ok_or_else(|| PyValueError::new_err(format!("regions {s:?}, expected MxN")))?;
    Ok(RegionConfig {
        m: m.parse().map_err(|e| PyValueError::new_err(format!("regions: {e}")))?,
        n: n.parse().map_err(|e| PyValueError::new_err(format!("regions: {e}")))?,
    })
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (threshold=0.6, regions="4x4", num_classes=7))]
    fn new(threshold: f64, regions: &str, num_classes: usize) -> PyResult<Self> {
        let mut cfg = OadnConfig::default();
        cfg.threshold = threshold;
        cfg.region = parse_regions(regions)?;
        cfg.num_classes = num_classes;
        cfg.num_regions().map_err(err)?;
        Ok(PyModel { cfg, params: None })
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.cfg.to_kv() {
            d.set_item(k, v)?;
        }
        Ok(d.unbind())
    }

    /// Trains on the dataset at `data`, keeping the epoch with the best
    /// fused accuracy on the occluded test split. Returns the log lines.
    #[pyo3(signature = (data, epochs=30, lr=0.05, lam=0.5, batch_size=32, seed=0, flip=true))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        data: PathBuf,
        epochs: usize,
        lr: f64,
        lam: f64,
        batch_size: usize,
        seed: u64,
        flip: bool,
    ) -> PyResult<Vec<String>> {
        let ds = load_dataset(&data).map_err(err)?;
        let tcfg = TrainConfig {
            epochs,
            lr,
            lambda: lam,
            batch_size,
            seed,
            flip_augment: flip,
            ..TrainConfig::default()
        };
        let mapping = PointMapping::default_mapping();
        let table = FlipTable::default_table();
        let mut lines = Vec::new();
        let outcome = train(&self.cfg, &tcfg, &ds.train, &ds.test, &mapping, &table, |s| {
            lines.push(s.log_line());
        })
        .map_err(err)?;
        lines.push(format!(
            "best epoch {} val_acc {:.6}",
            outcome.best_epoch, outcome.best_val_acc
        ));
        self.params = Some(outcome.best_params);
        Ok(lines)
    }

    /// Accuracy report on one split: {total_acc, avg_class_acc, confusion}.
    #[pyo3(signature = (data, split="test", branch="fused"))]
    fn score(&self, py: Python<'_>, data: PathBuf, split: &str, branch: &str) -> PyResult<Py<PyDict>> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no parameters; fit or load first"))?;
        let ds = load_dataset(&data).map_err(err)?;
        let records = match split {
            "train" => &ds.train,
            "test" => &ds.test,
            s => return Err(PyValueError::new_err(format!("unknown split {s:?}"))),
        };
        let branch = Branch::parse(branch).map_err(err)?;
        let mapping = PointMapping::default_mapping();
        let report = evaluate(records, params, &self.cfg, &mapping, branch).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("total_acc", report.total_accuracy())?;
        d.set_item("avg_class_acc", report.avg_class_accuracy())?;
        d.set_item("confusion", report.confusion.clone())?;
        Ok(d.unbind())
    }

    /// Fused class probabilities for one record of a stored dataset split.
    #[pyo3(signature = (data, index, split="test"))]
    fn predict_stored(&self, data: PathBuf, index: usize, split: &str) -> PyResult<Vec<f64>> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no parameters; fit or load first"))?;
        let ds = load_dataset(&data).map_err(err)?;
        let records = match split {
            "train" => &ds.train,
            "test" => &ds.test,
            s => return Err(PyValueError::new_err(format!("unknown split {s:?}"))),
        };
        let r = records
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let mapping = PointMapping::default_mapping();
        let out = predict(&r.image, &r.landmarks, params, &self.cfg, &mapping).map_err(err)?;
        Ok(out.fused_probs)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no parameters; fit or load first"))?;
        let manifest = manifest_for_run(&self.cfg, &TrainConfig::default(), &[]);
        save_checkpoint(&path, &manifest, params).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params, _) = load_model(&path).map_err(err)?;
        Ok(PyModel {
            cfg,
            params: Some(params),
        })
    }
}

/// Parses a `key = value` config text into a dict (utility mirror of the
/// CLI's config file format).
#[pyfunction]
fn parse_config(py: Python<'_>, text: &str) -> PyResult<Py<PyDict>> {
    let kv = parse_kv(text).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in kv {
        d.set_item(k, v)?;
    }
    Ok(d.unbind())
}

#[pymodule]
fn oadn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    Ok(())
}
