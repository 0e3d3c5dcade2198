//! Python bindings: models, training, checkpoints and diagnostics.

use std::path::PathBuf;

use adaroute::backbone::ModelGraph;
use adaroute::block::AdapterConfig;
use adaroute::checkpoint::{load_checkpoint, save_checkpoint};
use adaroute::config::RunConfig;
use adaroute::diagnostics::{
    audit_model, audit_params, cka_matrix, erf_map_model, expert_activation_map, random_probes, ArchSpec, ErfLayer,
};
use adaroute::optim::OptimState;
use adaroute::router::GateHead;
use adaroute::task::{make_sample, EVAL_OFFSET};
use adaroute::train::{evaluate, train};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn err(e: adaroute::Error) -> PyErr {
    match e {
        adaroute::Error::NonFinite { .. } | adaroute::Error::Divergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major float64 array.
#[pyclass(name = "Tensor", module = "adaroute_py", from_py_object)]
#[derive(Clone)]
struct PyTensor(adaroute::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        adaroute::Tensor::new(shape, data).map(PyTensor).map_err(err)
    }

    #[staticmethod]
    fn randn(shape: Vec<usize>, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PyTensor(adaroute::Tensor::randn(&shape, 1.0, &mut rng))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

type ReportRows = Vec<(usize, Option<f64>, Option<f64>)>;

/// A frozen backbone with optional adapters, a task head and the state
/// needed to keep training it.
#[pyclass(name = "Model", module = "adaroute_py")]
struct PyModel {
    graph: ModelGraph,
    config: Option<RunConfig>,
    optim: OptimState,
}

impl PyModel {
    fn config(&self) -> PyResult<&RunConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("model has no run configuration"))
    }
}

#[pymethods]
impl PyModel {
    /// Builds a fresh model from a JSON run configuration.
    #[staticmethod]
    fn from_config(json: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_json(json).map_err(err)?;
        Ok(PyModel {
            graph: cfg.build_model().map_err(err)?,
            config: Some(cfg),
            optim: OptimState::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(err)?;
        Ok(PyModel {
            graph: ck.model,
            config: ck.config,
            optim: ck.optim.unwrap_or_default(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.graph, Some(&self.optim), self.config.as_ref()).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.optim.step
    }

    fn trainable_count(&self) -> usize {
        self.graph.trainable_count()
    }

    fn config_json(&self) -> PyResult<String> {
        Ok(self.config()?.to_json())
    }

    /// Head output for one `C×H×W` input.
    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        let (tape, trace) = self.graph.run(&x.0).map_err(err)?;
        let logits = trace
            .logits
            .ok_or_else(|| PyValueError::new_err("model has no task head"))?;
        Ok(PyTensor(tape.value(logits).clone()))
    }

    /// Last-stage features for one input.
    fn features(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.graph.features(&x.0).map(PyTensor).map_err(err)
    }

    /// Trains up to `until` total steps; returns `(step, loss, metric)` rows.
    #[pyo3(signature = (until=None))]
    fn train(&mut self, py: Python<'_>, until: Option<usize>) -> PyResult<ReportRows> {
        let cfg = self.config()?.clone();
        let until = until.unwrap_or(cfg.train.steps);
        let (graph, optim) = (&mut self.graph, &mut self.optim);
        let report = py
            .detach(|| train(graph, optim, &cfg.task, &cfg.train, cfg.data_seed(), until))
            .map_err(err)?;
        Ok(report.rows.iter().map(|r| (r.step, r.loss, r.metric)).collect())
    }

    fn evaluate(&self) -> PyResult<f64> {
        let cfg = self.config()?;
        evaluate(&self.graph, &cfg.task, cfg.data_seed()).map_err(err)
    }

    /// Held-out task sample `index` as `(input, targets)`.
    fn sample(&self, index: u64) -> PyResult<(PyTensor, Vec<usize>)> {
        let cfg = self.config()?;
        let s = make_sample(&cfg.task, cfg.data_seed(), EVAL_OFFSET + index).map_err(err)?;
        Ok((PyTensor(s.input), s.targets))
    }

    /// Mean gates per site of `stage`, one row per site.
    fn expert_map(&self, images: Vec<PyTensor>, head: &str, stage: usize) -> PyResult<Vec<Vec<f64>>> {
        let head: GateHead = head.parse().map_err(err)?;
        let imgs: Vec<_> = images.into_iter().map(|t| t.0).collect();
        Ok(expert_activation_map(&self.graph, &imgs, head, stage).map_err(err)?.rows)
    }

    /// Block-by-block linear CKA over seeded random probes.
    #[pyo3(signature = (probes=16, seed=0))]
    fn cka(&self, probes: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let p = self.probes(probes, seed);
        Ok(cka_matrix(&self.graph, &p).map_err(err)?.values)
    }

    /// Max-normalised ERF of a stage output as a `H×W` tensor.
    #[pyo3(signature = (stage, probes=8, seed=0))]
    fn erf(&self, stage: usize, probes: usize, seed: u64) -> PyResult<PyTensor> {
        let p = self.probes(probes, seed);
        let m = erf_map_model(&self.graph, &p, ErfLayer::Stage(stage)).map_err(err)?;
        adaroute::Tensor::new(vec![m.height, m.width], m.values)
            .map(PyTensor)
            .map_err(err)
    }

    fn audit(&self) -> String {
        audit_model(&self.graph).render()
    }
}

impl PyModel {
    fn probes(&self, n: usize, seed: u64) -> Vec<adaroute::Tensor> {
        let size = self.config.as_ref().map_or(16, |c| c.task.image_size);
        random_probes(n, self.graph.config.in_channels, size, seed)
    }
}

/// Default run configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Closed-form parameter audit; `adapter` is an optional JSON adapter config.
#[pyfunction]
#[pyo3(signature = (arch, adapter=None))]
fn audit(arch: &str, adapter: Option<&str>) -> PyResult<(usize, String)> {
    let spec = ArchSpec::named(arch).map_err(err)?;
    let acfg = match adapter {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None if arch == "toy" => AdapterConfig::default(),
        None => AdapterConfig::full_scale(),
    };
    let a = audit_params(&spec, &acfg).map_err(err)?;
    Ok((a.grand_total, a.render()))
}

#[pyfunction]
fn linear_cka(x: &PyTensor, y: &PyTensor) -> PyResult<f64> {
    adaroute::diagnostics::linear_cka(&x.0, &y.0).map_err(err)
}

#[pymodule]
fn adaroute_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    Ok(())
}
