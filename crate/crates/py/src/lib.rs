//! Python bindings: `import ovsg`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ovsg_core::benchmark::{self, EvalConfig, SplitSpec, SynthSpec};
use ovsg_core::matching::{self, CostMatrix};
use ovsg_core::model::ModelConfig;
use ovsg_core::train::{self, TrainConfig, TrainError};
use ovsg_core::types;
use ovsg_core::weak::{self, Lexicon};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::InvalidConfig(_) | TrainError::MissingTeacher(_) | TrainError::VocabularyMismatch { .. } => value_err(e),
        e => runtime_err(e),
    }
}

/// Deserializes an optional Python dict through JSON; `None` gives the default.
fn from_dict<T: serde::de::DeserializeOwned + Default>(py: Python<'_>, dict: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(dict) = dict else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (dict,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn to_python<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone)]
struct PyBBox(types::BBox);

#[pymethods]
impl PyBBox {
    /// Normalized center format.
    #[new]
    fn new(cx: f64, cy: f64, w: f64, h: f64) -> PyResult<Self> {
        types::BBox::new(cx, cy, w, h).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        types::BBox::from_corners(x1, y1, x2, y2).map(Self).map_err(value_err)
    }

    fn center(&self) -> (f64, f64, f64, f64) {
        let [cx, cy, w, h] = self.0.to_array();
        (cx, cy, w, h)
    }

    fn corners(&self) -> (f64, f64, f64, f64) {
        let [x1, y1, x2, y2] = self.0.corners();
        (x1, y1, x2, y2)
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        self.0.iou(&other.0)
    }

    fn giou(&self, other: &PyBBox) -> f64 {
        self.0.giou(&other.0)
    }

    fn __repr__(&self) -> String {
        let [cx, cy, w, h] = self.0.to_array();
        format!("BBox(cx={cx}, cy={cy}, w={w}, h={h})")
    }
}

/// A dataset plus the directory its feature references resolve against.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: types::Dataset,
    root: PathBuf,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = types::Dataset::load(&path).map_err(value_err)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { inner, root })
    }

    /// Writes the dataset JSON. Feature files stay where they are, so save next to them.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn image_ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.image_id.clone()).collect()
    }

    #[getter]
    fn object_names(&self) -> Vec<String> {
        self.inner.vocabulary.object_names().to_vec()
    }

    #[getter]
    fn relation_names(&self) -> Vec<String> {
        self.inner.vocabulary.relation_names().to_vec()
    }

    fn triplet_count(&self) -> usize {
        self.inner.triplet_count()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = self.inner.to_json().map_err(runtime_err)?;
        py.import("json")?.call_method1("loads", (text,))
    }

    /// Returns `(train, eval, manifest)`; see `SplitSpec` for the accepted keys.
    #[pyo3(signature = (spec))]
    fn split<'py>(&self, py: Python<'py>, spec: &Bound<'py, PyDict>) -> PyResult<(Self, Self, Bound<'py, PyAny>)> {
        let text: String = py.import("json")?.call_method1("dumps", (spec,))?.extract()?;
        let spec: SplitSpec = serde_json::from_str(&text).map_err(value_err)?;
        let split = benchmark::build_split(&self.inner, &spec).map_err(value_err)?;
        let manifest = to_python(py, &split.manifest)?;
        let wrap = |inner| Self { inner, root: self.root.clone() };
        Ok((wrap(split.train), wrap(split.eval), manifest))
    }
}

#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint(train::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        train::Checkpoint::load(&dir).map(Self).map_err(value_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).map_err(runtime_err)
    }

    #[getter]
    fn object_names(&self) -> Vec<String> {
        self.0.meta.object_names.clone()
    }

    #[getter]
    fn relation_names(&self) -> Vec<String> {
        self.0.meta.relation_names.clone()
    }

    #[getter]
    fn final_loss(&self) -> Option<f64> {
        self.0.meta.final_loss
    }

    fn metadata<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &self.0.meta)
    }
}

/// Minimum-cost assignment of every row to a distinct column.
#[pyfunction]
fn match_bipartite(costs: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let rows = costs.len();
    let cols = costs.first().map_or(0, Vec::len);
    if costs.iter().any(|r| r.len() != cols) {
        return Err(value_err("cost rows have different lengths"));
    }
    let m = CostMatrix::from_costs(rows, cols, costs.concat()).map_err(value_err)?;
    let r = matching::match_bipartite(&m).map_err(value_err)?;
    Ok((r.assignment, r.total_cost))
}

#[pyfunction]
fn parse_caption(text: &str, objects: Vec<String>, relations: Vec<String>) -> Vec<(String, String, String)> {
    weak::parse_caption(text, &Lexicon::new(&objects, &relations))
        .into_iter()
        .map(|t| (t.subject, t.relation, t.object))
        .collect()
}

/// Generates a synthetic dataset with its feature files under `out` and loads it.
#[pyfunction]
#[pyo3(signature = (out, spec=None))]
fn generate_synthetic(py: Python<'_>, out: PathBuf, spec: Option<&Bound<'_, PyDict>>) -> PyResult<PyDataset> {
    let spec: SynthSpec = from_dict(py, spec)?;
    let data = benchmark::generate_synthetic(&spec).map_err(value_err)?;
    benchmark::write_synthetic(&out, &spec, &data).map_err(runtime_err)?;
    Ok(PyDataset { inner: data.dataset, root: out })
}

#[pyfunction]
#[pyo3(signature = (dataset, model=None, config=None))]
fn pretrain(
    py: Python<'_>,
    dataset: &PyDataset,
    model: Option<&Bound<'_, PyDict>>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyCheckpoint> {
    let model: ModelConfig = from_dict(py, model)?;
    let cfg: TrainConfig = from_dict(py, config)?;
    let maps = train::load_feature_maps(&dataset.inner, &dataset.root).map_err(value_err)?;
    let out = py
        .detach(|| train::pretrain(&dataset.inner, &maps, &model, &cfg, |_| {}))
        .map_err(train_err)?;
    Ok(PyCheckpoint(out.teacher))
}

#[pyfunction]
#[pyo3(signature = (dataset, teacher=None, model=None, config=None))]
fn finetune(
    py: Python<'_>,
    dataset: &PyDataset,
    teacher: Option<&PyCheckpoint>,
    model: Option<&Bound<'_, PyDict>>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyCheckpoint> {
    let model: ModelConfig = from_dict(py, model)?;
    let cfg: TrainConfig = from_dict(py, config)?;
    let maps = train::load_feature_maps(&dataset.inner, &dataset.root).map_err(value_err)?;
    let teacher = teacher.map(|t| &t.0);
    let out = py
        .detach(|| train::finetune(&dataset.inner, &maps, teacher, &model, &cfg, |_| {}))
        .map_err(train_err)?;
    Ok(PyCheckpoint(out.student))
}

/// Predicts every image and returns the recall report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, config=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &PyCheckpoint,
    dataset: &PyDataset,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg: EvalConfig = from_dict(py, config)?;
    let ck = &checkpoint.0;
    let concepts = ck.check_vocabulary(&dataset.inner.vocabulary).map_err(train_err)?;
    let maps = train::load_feature_maps(&dataset.inner, &dataset.root).map_err(value_err)?;
    cfg.graph_constraint = ck.model.config().graph_constraint;
    let report = py.detach(|| -> Result<_, TrainError> {
        let preds = train::predict_dataset(ck, &dataset.inner, &maps, &concepts)?;
        Ok(benchmark::evaluate_sgdet(&preds, &dataset.inner, &cfg))
    });
    to_python(py, &report.map_err(train_err)?)
}

#[pymodule]
fn ovsg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(match_bipartite, m)?)?;
    m.add_function(wrap_pyfunction!(parse_caption, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
