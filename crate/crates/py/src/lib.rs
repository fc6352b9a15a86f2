//! Python bindings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lomo_core::estimator::{self, ArchSpec, MemPrecision};
use lomo_core::trainer::{self, LrSchedule};
use lomo_core::{
    build_model, optim, Category, ClipMode, Error, OptimizerKind, Precision, Session, Tensor,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::ConfigParse(_) | Error::ShapeMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_optimizer(name: &str, lr: f64) -> PyResult<OptimizerKind> {
    match name.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd { lr }),
        "lomo" => Ok(OptimizerKind::Lomo { lr }),
        "adamw" => Ok(OptimizerKind::adamw(lr)),
        other => Err(PyValueError::new_err(format!("unknown optimizer {other}"))),
    }
}

fn parse_category(name: &str) -> PyResult<Category> {
    Category::ALL
        .into_iter()
        .find(|c| format!("{c:?}").eq_ignore_ascii_case(name) || category_key(*c) == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown category {name}")))
}

fn category_key(c: Category) -> &'static str {
    match c {
        Category::Params => "params",
        Category::Gradients => "gradients",
        Category::OptimStates => "optim_states",
        Category::Activations => "activations",
    }
}

#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: trainer::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Tanh MLP on synthetic regression.
    #[staticmethod]
    #[pyo3(signature = (optimizer = "lomo", lr = 0.05, steps = 100, seed = 0))]
    fn regression(optimizer: &str, lr: f64, steps: usize, seed: u64) -> PyResult<Self> {
        let inner = trainer::RunConfig::regression(parse_optimizer(optimizer, lr)?, steps, seed);
        inner.validate().map_err(err)?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: trainer::RunConfig::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[setter]
    fn set_steps(&mut self, steps: usize) {
        self.inner.steps = steps;
    }

    #[getter]
    fn optimizer(&self) -> &'static str {
        self.inner.optimizer.name()
    }

    #[setter]
    fn set_optimizer(&mut self, name: &str) -> PyResult<()> {
        self.inner.optimizer = parse_optimizer(name, self.inner.optimizer.lr())?;
        Ok(())
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.optimizer.lr()
    }

    #[setter]
    fn set_lr(&mut self, lr: f64) {
        self.inner.optimizer = self.inner.optimizer.with_lr(lr);
    }

    #[getter]
    fn half_precision(&self) -> bool {
        self.inner.precision == Precision::HalfEmulated
    }

    #[setter]
    fn set_half_precision(&mut self, on: bool) {
        self.inner.precision = if on { Precision::HalfEmulated } else { Precision::Full };
    }

    #[getter]
    fn checkpointing(&self) -> bool {
        self.inner.checkpointing
    }

    #[setter]
    fn set_checkpointing(&mut self, on: bool) {
        self.inner.checkpointing = on;
    }

    #[getter]
    fn loss_scaling(&self) -> bool {
        self.inner.scaler.is_some()
    }

    #[setter]
    fn set_loss_scaling(&mut self, on: bool) {
        self.inner.scaler = on.then(Default::default);
    }

    fn clip_by_value(&mut self, threshold: f64) {
        self.inner.clip = ClipMode::ByValue { threshold };
    }

    #[pyo3(signature = (max_norm, window = None))]
    fn clip_by_norm(&mut self, max_norm: f64, window: Option<usize>) {
        self.inner.clip = match window {
            Some(window) => ClipMode::ByGroupNorm { max_norm, window },
            None => ClipMode::ByGlobalNorm { max_norm },
        };
    }

    fn no_clip(&mut self) {
        self.inner.clip = ClipMode::None;
    }

    #[pyo3(signature = (warmup_ratio = 0.0))]
    fn linear_decay(&mut self, warmup_ratio: f64) {
        self.inner.lr_schedule = LrSchedule::LinearDecay { warmup_ratio };
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(optimizer={:?}, lr={}, steps={}, hash={})",
            self.inner.optimizer.name(),
            self.inner.optimizer.lr(),
            self.inner.steps,
            &self.inner.hash()[..16]
        )
    }
}

#[pyclass(name = "RunReport", frozen, skip_from_py_object)]
struct PyRunReport {
    inner: trainer::RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.inner.losses.clone()
    }

    #[getter]
    fn final_digest(&self) -> &str {
        &self.inner.final_digest
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    #[getter]
    fn schema_version(&self) -> u32 {
        self.inner.schema_version
    }

    #[getter]
    fn backward_passes(&self) -> u64 {
        self.inner.passes.backward_passes
    }

    /// Peak bytes per ledger category.
    fn peak_bytes(&self) -> Vec<(&'static str, u64)> {
        Category::ALL
            .into_iter()
            .map(|c| (category_key(c), self.inner.memory.peak(c)))
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Write the report and its loss table into `directory`; returns the path.
    fn emit(&self, directory: &str) -> PyResult<String> {
        let p = trainer::emit_into(&self.inner, directory.as_ref()).map_err(err)?;
        Ok(p.display().to_string())
    }
}

/// Step-by-step training of one config.
#[pyclass(name = "Trainer", skip_from_py_object)]
struct PyTrainer {
    config: trainer::RunConfig,
    session: Session,
    step: usize,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        cfg.validate().map_err(err)?;
        let model = build_model(&cfg.model).map_err(err)?.into_precision(cfg.precision);
        Ok(PyTrainer {
            session: Session::new(model, cfg.policy()).map_err(err)?,
            config: cfg,
            step: 0,
        })
    }

    /// One optimizer step; returns the loss before the update.
    fn step(&mut self) -> PyResult<f64> {
        let c = &self.config;
        let batch = c.task.sample_batch(c.batch, self.step as u64).map_err(err)?;
        let lr = c.lr_schedule.lr_at(c.optimizer.lr(), self.step.min(c.steps - 1), c.steps);
        let mut scaler = c.scaler;
        let res = optim::step(&mut self.session, &c.optimizer, &batch, lr, c.clip, scaler.as_mut())
            .map_err(err)?;
        self.config.scaler = scaler;
        self.step += 1;
        Ok(res.loss)
    }

    fn digest(&self) -> String {
        self.session.model.digest()
    }

    fn peak_bytes(&self, category: &str) -> PyResult<u64> {
        Ok(self.session.ledger.peak(parse_category(category)?))
    }

    fn param_names(&self) -> Vec<String> {
        self.session.model.params().iter().map(|p| p.name.clone()).collect()
    }

    fn param_values(&self, name: &str) -> PyResult<Vec<f64>> {
        self.session
            .model
            .param(name)
            .map(|p| p.value.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no parameter {name}")))
    }
}

/// One row of the closed-form memory table, in GiB.
#[pyclass(name = "MemoryEstimate", frozen, get_all, skip_from_py_object)]
struct PyMemoryEstimate {
    optimizer: String,
    activation_checkpointing: bool,
    params_gib: f64,
    gradients_gib: f64,
    optim_states_gib: f64,
    activations_gib: f64,
    total_gib: f64,
    param_count: u64,
}

#[pymethods]
impl PyMemoryEstimate {
    fn __repr__(&self) -> String {
        format!(
            "MemoryEstimate({}, ac={}, total={:.2} GiB)",
            self.optimizer, self.activation_checkpointing, self.total_gib
        )
    }
}

#[pyfunction]
fn run(config: &PyRunConfig) -> PyResult<PyRunReport> {
    Ok(PyRunReport {
        inner: trainer::run(&config.inner).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (preset = "llama-7b", full_precision = false, seq_len = 512, batch = 8))]
fn estimate(preset: &str, full_precision: bool, seq_len: u64, batch: u64) -> PyResult<Vec<PyMemoryEstimate>> {
    let arch = ArchSpec::preset(preset).ok_or_else(|| PyValueError::new_err(format!("unknown preset {preset}")))?;
    let precision = if full_precision {
        MemPrecision::Full32
    } else {
        MemPrecision::Mixed16
    };
    let rows = estimator::table(&arch, precision, seq_len, batch).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| PyMemoryEstimate {
            optimizer: r.optimizer.to_string(),
            activation_checkpointing: r.activation_checkpointing,
            params_gib: r.params_gib,
            gradients_gib: r.gradients_gib,
            optim_states_gib: r.optim_states_gib,
            activations_gib: r.activations_gib,
            total_gib: r.total_gib,
            param_count: r.param_count,
        })
        .collect())
}

/// Returns `(divergence at lr, divergence at lr / 2)` on the config's model,
/// using the first two single-sample batches of its task.
#[pyfunction]
fn implicit_batch(config: &PyRunConfig, lr: f64) -> PyResult<(f64, f64)> {
    let c = &config.inner;
    let model = build_model(&c.model).map_err(err)?;
    let d_i = c.task.sample_batch(1, 0).map_err(err)?;
    let d_j = c.task.sample_batch(1, 1).map_err(err)?;
    let r = trainer::implicit_batch_experiment(&model, &d_i, &d_j, lr).map_err(err)?;
    Ok((r.divergence, r.divergence_half_lr))
}

#[pyfunction]
fn round_to_half(x: f64) -> f64 {
    lomo_core::half::round_to_half(x)
}

#[pyfunction]
fn clip_by_value(values: Vec<f64>, threshold: f64) -> Vec<f64> {
    lomo_core::stabilize::clip_by_value(&Tensor::from_vec(values), threshold).into_data()
}

#[pymodule]
fn lomo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyMemoryEstimate>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(implicit_batch, m)?)?;
    m.add_function(wrap_pyfunction!(round_to_half, m)?)?;
    m.add_function(wrap_pyfunction!(clip_by_value, m)?)?;
    m.add("REPORT_SCHEMA_VERSION", trainer::REPORT_SCHEMA_VERSION)?;
    Ok(())
}
