//! Python bindings: datasets, the scalar building blocks and the full
//! search / train / evaluate pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use dvbe::amse::{self, EmbedKind, MarginConfig, MarginMode};
use dvbe::autos2v::CellSpec;
use dvbe::checkpoint::{self, Checkpoint};
use dvbe::dataio::{self, GzslDataset, SynthConfig};
use dvbe::gate::{self, DEFAULT_PERCENTILE};
use dvbe::metrics::{self, MetricsReport};
use dvbe::numerics::Tensor;
use dvbe::trainer::{self, Dvbe, ModelConfig, TrainConfig};

fn py_err(e: dvbe::Error) -> PyErr {
    match e {
        dvbe::Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait PyResultExt<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> PyResultExt<T> for dvbe::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A generalized zero-shot split with seen and unseen test samples.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(GzslDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed=1, n_seen=8, n_unseen=4, samples_per_class=50, noise_scale=0.3))]
    fn synth(seed: u64, n_seen: usize, n_unseen: usize, samples_per_class: usize, noise_scale: f64) -> PyResult<Self> {
        let cfg = SynthConfig { seed, n_seen, n_unseen, samples_per_class, noise_scale, ..Default::default() };
        Ok(PyDataset(dataio::synth_gzsl(&cfg).py()?))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset(dataio::load_dir(&dir).py()?))
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        dataio::write_dir(&self.0, &dir).py()
    }

    #[getter]
    fn seen_classes(&self) -> Vec<u32> {
        self.0.seen_ids()
    }

    #[getter]
    fn unseen_classes(&self) -> Vec<u32> {
        self.0.unseen_ids()
    }

    /// Sample counts of train_seen, val_seen, test_seen and test_unseen.
    fn split_sizes(&self) -> (usize, usize, usize, usize) {
        let d = &self.0;
        (d.train_seen.len(), d.val_seen.len(), d.test_seen.len(), d.test_unseen.len())
    }
}

fn report_dict(py: Python<'_>, r: &MetricsReport) -> PyResult<Py<PyAny>> {
    let d = pyo3::types::PyDict::new(py);
    for (k, v) in [("mca_s", r.mca_s), ("mca_u", r.mca_u), ("h", r.h), ("r_s", r.r_s), ("r_u", r.r_u), ("h_r", r.h_r)] {
        d.set_item(k, v)?;
    }
    Ok(d.into_any().unbind())
}

/// Architecture search, fixed-cell training and gated evaluation.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    dataset: Py<PyDataset>,
    model: ModelConfig,
    config: TrainConfig,
    cell: Option<CellSpec>,
    trained: Option<(Dvbe, f64)>,
}

impl PyPipeline {
    fn trained(&self) -> PyResult<&(Dvbe, f64)> {
        self.trained.as_ref().ok_or_else(|| PyValueError::new_err("call train() first"))
    }
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (dataset, seed=1, epochs_stage1=20, epochs_stage2=60, lr=0.05, margin="adaptive", embed_kind="cross_attentive"))]
    fn new(
        dataset: Py<PyDataset>,
        seed: u64,
        epochs_stage1: usize,
        epochs_stage2: usize,
        lr: f64,
        margin: &str,
        embed_kind: &str,
    ) -> PyResult<Self> {
        let mode: MarginMode = margin.parse().py()?;
        let kind: EmbedKind = embed_kind.parse().py()?;
        let config = TrainConfig {
            seed,
            epochs_stage1,
            epochs_stage2,
            lr,
            margin: MarginConfig { mode, ..Default::default() },
            ..TrainConfig::desk()
        };
        config.validate().py()?;
        let model = ModelConfig { embed_kind: kind, ..Default::default() };
        Ok(PyPipeline { dataset, model, config, cell: None, trained: None })
    }

    /// Runs the architecture search and returns the cell as text.
    fn search(&mut self, py: Python<'_>) -> PyResult<String> {
        let ds = &self.dataset.get().0;
        let (model, config) = (&self.model, &self.config);
        let cell = py.detach(|| -> dvbe::Result<CellSpec> {
            let mut models = Dvbe::init(ds, model, None, config.seed)?;
            trainer::train_stage1(ds, &mut models, config)?;
            models.fix_architecture()
        });
        let cell = cell.py()?;
        let text = cell.to_text();
        self.cell = Some(cell);
        Ok(text)
    }

    /// Trains on `cell` (text), the searched cell, or the two-layer fully
    /// connected cell, in that order of preference. Returns the calibrated τ.
    #[pyo3(signature = (cell=None, percentile=DEFAULT_PERCENTILE))]
    fn train(&mut self, py: Python<'_>, cell: Option<&str>, percentile: f64) -> PyResult<f64> {
        let cell = match cell {
            Some(text) => CellSpec::from_text(text).py()?,
            None => self.cell.clone().unwrap_or_else(CellSpec::two_layer_fc),
        };
        let ds = &self.dataset.get().0;
        let (model, config) = (&self.model, &self.config);
        let (models, _, tau) = py.detach(|| trainer::train_cell(ds, model, config, cell.clone(), percentile)).py()?;
        self.cell = Some(cell);
        self.trained = Some((models, tau));
        Ok(tau)
    }

    #[getter]
    fn cell(&self) -> Option<String> {
        self.cell.as_ref().map(CellSpec::to_text)
    }

    /// Test metrics at `tau`, defaulting to the calibrated threshold.
    #[pyo3(signature = (tau=None))]
    fn evaluate(&self, py: Python<'_>, tau: Option<f64>) -> PyResult<Py<PyAny>> {
        let (models, calibrated) = self.trained()?;
        let r = gate::evaluate(&self.dataset.get().0, &models.amse, &models.s2v, tau.unwrap_or(*calibrated)).py()?;
        report_dict(py, &r)
    }

    /// `(tau, metrics)` pairs over `n` evenly spaced thresholds.
    fn tau_sweep(&self, py: Python<'_>, lo: f64, hi: f64, n: usize) -> PyResult<Vec<(f64, Py<PyAny>)>> {
        let (models, _) = self.trained()?;
        let ds = &self.dataset.get().0;
        let outcomes = gate::outcomes(ds, &models.amse, &models.s2v).py()?;
        let rows = gate::tau_sweep(ds, &outcomes, &gate::linear_grid(lo, hi, n)).py()?;
        rows.iter().map(|(t, r)| Ok((*t, report_dict(py, r)?))).collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let (models, tau) = self.trained()?;
        checkpoint::save(&Checkpoint { models: models.clone(), tau: Some(*tau) }, &path).py()
    }
}

#[pyfunction]
#[pyo3(signature = (p_y, sigma=0.5))]
fn adaptive_lambda(p_y: f64, sigma: f64) -> f64 {
    amse::adaptive_lambda(p_y, sigma)
}

#[pyfunction]
fn entropy(probs: Vec<f64>) -> PyResult<f64> {
    gate::entropy(&Tensor::vector(probs).py()?).py()
}

#[pyfunction]
fn harmonic(a: f64, b: f64) -> f64 {
    metrics::harmonic(a, b)
}

/// `Σₙ xₙᵀxₙ` over the rows of `x`.
#[pyfunction]
fn bilinear_pool(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = amse::bilinear_pool(&Tensor::from_rows(&x).py()?).py()?;
    let c = m.shape()[0];
    Ok((0..c).map(|i| m.row(i).to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (entropies, percentile=DEFAULT_PERCENTILE))]
fn calibrate_tau(entropies: Vec<f64>, percentile: f64) -> PyResult<f64> {
    gate::calibrate_tau(&entropies, percentile).py()
}

#[pymodule]
fn dvbe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(adaptive_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_pool, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_tau, m)?)?;
    Ok(())
}
