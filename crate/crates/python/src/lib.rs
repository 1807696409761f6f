use ndarray::Array4;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use vcil::config::ExperimentConfig;
use vcil::dataset::{generate_synthetic_dataset, SyntheticSpec};
use vcil::evaluation::{average_accuracy as acc_k, average_forgetting as for_k, forgetting as f_kj, AccuracyMatrix};
use vcil::memory::{self, Alignment};
use vcil::protocol::{run_incremental_experiment, ExperimentData};
use vcil::report::{metric_table, MetricsExport};

fn err(e: vcil::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_alignment(mode: &str) -> PyResult<Alignment> {
    match mode {
        "uniform" => Ok(Alignment::Uniform),
        "repeated" => Ok(Alignment::Repeated),
        "none" => Ok(Alignment::None),
        other => Err(PyValueError::new_err(format!(
            "alignment must be uniform, repeated or none, got {other:?}"
        ))),
    }
}

/// One video: frames `(T, C, H, W)` with values in `[0, 1]`, a label and an id.
#[pyclass(name = "FrameSequence", module = "pyvcil", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFrameSequence(vcil::FrameSequence);

#[pymethods]
impl PyFrameSequence {
    /// `data` is the flat row-major pixel list of shape `(T, C, H, W)`.
    #[new]
    #[pyo3(signature = (data, shape, label, source_id = String::from("py")))]
    fn new(data: Vec<f32>, shape: (usize, usize, usize, usize), label: usize, source_id: String) -> PyResult<Self> {
        let frames = Array4::from_shape_vec(shape, data).map_err(|e| PyValueError::new_err(e.to_string()))?;
        vcil::FrameSequence::new(frames, label, source_id).map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let (c, h, w) = self.0.frame_shape();
        (self.0.len(), c, h, w)
    }

    #[getter]
    fn label(&self) -> usize {
        self.0.label()
    }

    #[getter]
    fn source_id(&self) -> String {
        self.0.source_id().to_owned()
    }

    /// Flat row-major pixel values.
    fn to_list(&self) -> Vec<f32> {
        self.0.frames().iter().copied().collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("FrameSequence(shape={:?}, label={}, source_id={:?})", self.shape(), self.0.label(), self.0.source_id())
    }
}

#[pyfunction]
#[pyo3(signature = (num_classes, samples_per_class, frames, channels = 3, height = 16, width = 16, seed = 0))]
fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<Vec<PyFrameSequence>> {
    let spec = SyntheticSpec { num_classes, samples_per_class, frames, channels, height, width, seed };
    Ok(generate_synthetic_dataset(&spec).map_err(err)?.into_iter().map(PyFrameSequence).collect())
}

/// Class groups of a seeded schedule: the initial task first, then each stage.
#[pyfunction]
fn make_schedule(num_classes: usize, initial: usize, per_stage: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    Ok(vcil::dataset::make_schedule(num_classes, initial, per_stage, seed).map_err(err)?.groups)
}

#[pyfunction]
fn sparse_extract(seq: &PyFrameSequence, sparse_frames: usize) -> PyResult<PyFrameSequence> {
    memory::sparse_extract(&seq.0, sparse_frames).map(PyFrameSequence).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (seq, frames, mode = "repeated"))]
fn align(seq: &PyFrameSequence, frames: usize, mode: &str) -> PyResult<PyFrameSequence> {
    memory::align(&seq.0, frames, parse_alignment(mode)?).map(PyFrameSequence).map_err(err)
}

#[pyfunction]
fn herding_select(features: Vec<Vec<f64>>, class_mean: Vec<f64>, m: usize) -> PyResult<Vec<usize>> {
    let d = class_mean.len();
    if features.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("every feature row needs the class mean's length"));
    }
    let n = features.len();
    let array = ndarray::Array2::from_shape_vec((n, d), features.concat())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    memory::herding_select(array.view(), &class_mean, m).map_err(err)
}

/// Videos of `sparse_frames` frames that fit in `budget` bytes.
#[pyfunction]
fn capacity(budget: usize, sparse_frames: usize, frame_bytes: usize) -> PyResult<usize> {
    if sparse_frames == 0 || frame_bytes == 0 {
        return Err(PyValueError::new_err("sparse_frames and frame_bytes must be >= 1"));
    }
    Ok(memory::capacity(budget, sparse_frames, frame_bytes))
}

#[pyfunction]
fn average_accuracy(row: Vec<f64>) -> PyResult<f64> {
    acc_k(&row).map_err(err)
}

#[pyfunction]
fn forgetting(rows: Vec<Vec<f64>>, k: usize, j: usize) -> PyResult<f64> {
    f_kj(&AccuracyMatrix::from_rows(rows).map_err(err)?, k, j).map_err(err)
}

#[pyfunction]
fn average_forgetting(rows: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    for_k(&AccuracyMatrix::from_rows(rows).map_err(err)?, k).map_err(err)
}

/// Field-level problems of a TOML config; empty when it is runnable.
#[pyfunction]
fn validate_config(toml_text: &str) -> PyResult<Vec<String>> {
    let config = ExperimentConfig::from_toml_str(toml_text).map_err(err)?;
    Ok(config.issues().iter().map(ToString::to_string).collect())
}

/// Runs one seed of a TOML config. Returns `(metric_table_csv, metrics_json)`.
#[pyfunction]
fn run_experiment(py: Python<'_>, toml_text: &str, seed: u64) -> PyResult<(String, String)> {
    let config = ExperimentConfig::from_toml_str(toml_text).map_err(err)?;
    let report = py
        .detach(|| {
            let data = ExperimentData::from_config(&config)?;
            run_incremental_experiment(&config, &data, seed, None)
        })
        .map_err(err)?;
    let json = serde_json::to_string(&MetricsExport::new(&report))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((metric_table(&report.metrics, &report.schedule), json))
}

#[pymodule]
fn pyvcil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFrameSequence>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_extract, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(herding_select, m)?)?;
    m.add_function(wrap_pyfunction!(capacity, m)?)?;
    m.add_function(wrap_pyfunction!(average_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(average_forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
