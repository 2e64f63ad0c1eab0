//! Python bindings: run configuration, noise schedule, losses, timestep
//! samplers, the full pipeline, the command line, and sampling from a
//! trained checkpoint.

use std::path::PathBuf;

use avatar_lcm::cli::Cli;
use avatar_lcm::config::RunConfig;
use avatar_lcm::eval::Projection;
use avatar_lcm::experiments::{self, EvalSet, PipelinePlan, Weights};
use avatar_lcm::losses::{self, MotionMode};
use avatar_lcm::ndcore::{Array, ParamStore, Prng};
use avatar_lcm::schedule::{self, NoiseSchedule};
use avatar_lcm::solver;
use avatar_lcm::train::Models;
use avatar_lcm::Error;
use clap::Parser;
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Shape { .. } => {
            PyValueError::new_err(msg)
        }
        Error::MissingCheckpoint(_) => PyFileNotFoundError::new_err(msg),
        Error::NonFinite(_) => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn array(data: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<Array> {
    match shape {
        Some(s) => Array::new(s, data).map_err(to_py),
        None => Ok(Array::from_vec(data)),
    }
}

fn motion_mode(name: &str) -> PyResult<MotionMode> {
    match name {
        "per_transition" => Ok(MotionMode::PerTransition),
        "scalar" => Ok(MotionMode::Scalar),
        _ => Err(PyValueError::new_err(format!(
            "unknown motion mode {name:?}"
        ))),
    }
}

/// Run configuration with every tunable of the pipeline.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    /// Reduced shapes and iteration counts for quick runs.
    #[staticmethod]
    fn small() -> Self {
        Self {
            inner: RunConfig::small(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_json_str(text, "python").map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = RunConfig::load(&path).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_pretty_json()
    }

    /// Copy with `key.path=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let inner = self.inner.with_overrides(&overrides).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

/// Variance-preserving noise schedule.
#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=1000, beta_min=1e-4, beta_max=0.02))]
    fn new(steps: usize, beta_min: f64, beta_max: f64) -> PyResult<Self> {
        Ok(Self {
            inner: NoiseSchedule::build(steps, beta_min, beta_max).map_err(to_py)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.alpha(t))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.beta(t))
    }

    fn forward_noise(&self, x0: Vec<f64>, eps: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
        let out = self
            .inner
            .forward_noise(&Array::from_vec(x0), &Array::from_vec(eps), t)
            .map_err(to_py)?;
        Ok(out.into_data())
    }

    /// Descending `k`-point sampling grid.
    fn grid(&self, k: usize) -> PyResult<Vec<usize>> {
        solver::timestep_grid(self.inner.steps(), k).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, delta=1e-3))]
fn huber(a: Vec<f64>, b: Vec<f64>, delta: f64) -> PyResult<f64> {
    schedule::huber(&Array::from_vec(a), &Array::from_vec(b), delta).map_err(to_py)
}

#[pyfunction]
fn disc_loss(score_real: f64, score_fake: f64) -> f64 {
    losses::disc_loss(score_real, score_fake)
}

#[pyfunction]
fn adv_loss(score_fake: f64) -> f64 {
    losses::adv_loss(score_fake)
}

/// Motion loss between two `(c, frames, h, w)` clips given flat.
#[pyfunction]
#[pyo3(signature = (x0, x0_hat, shape, mode="per_transition"))]
fn motion_loss(x0: Vec<f64>, x0_hat: Vec<f64>, shape: Vec<usize>, mode: &str) -> PyResult<f64> {
    let a = array(x0, Some(shape.clone()))?;
    let b = array(x0_hat, Some(shape))?;
    losses::motion_loss(&a, &b, motion_mode(mode)?).map_err(to_py)
}

/// Discriminator timesteps for update counters `1..=n`.
#[pyfunction]
#[pyo3(signature = (n, seed=0, steps=1000))]
fn progressive_timesteps(n: u64, seed: u64, steps: usize) -> PyResult<Vec<usize>> {
    let mut rng = Prng::new(seed);
    (1..=n)
        .map(|i| schedule::sample_t_progressive(i, &mut rng, steps).map_err(to_py))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (n, seed=0, steps=1000))]
fn editing_timesteps(n: usize, seed: u64, steps: usize) -> Vec<usize> {
    let mut rng = Prng::new(seed);
    (0..n)
        .map(|_| schedule::sample_t_eft(&mut rng, steps))
        .collect()
}

/// Teacher, distillation variants, editing stage and all evaluations.
/// Returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, out=None, ablations=true, stage2=true, rolling=true))]
fn run_pipeline(
    config: &PyConfig,
    out: Option<PathBuf>,
    ablations: bool,
    stage2: bool,
    rolling: bool,
) -> PyResult<String> {
    let plan = PipelinePlan {
        ablations,
        stage2,
        rolling: stage2 && rolling,
    };
    let report = experiments::run_pipeline(&config.inner, plan, out.as_deref(), |s| {
        eprintln!("[avatar-lcm] {s}")
    })
    .map_err(to_py)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Run a command-line invocation in-process; returns its JSON summary.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<String> {
    let argv = std::iter::once("avatar-lcm".to_string()).chain(args);
    let cli = Cli::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let v = avatar_lcm::cli::run(&cli).map_err(to_py)?;
    Ok(v.to_string())
}

/// One-step generator loaded from a distillation checkpoint, sampling on
/// the held-out conditioning set.
#[pyclass(name = "Generator")]
struct PyGenerator {
    cfg: RunConfig,
    models: Models,
    student: ParamStore,
    phase: String,
}

#[pymethods]
impl PyGenerator {
    /// Load the student weights and the configuration stored with them.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (w, ck) = Weights::load(&path).map_err(to_py)?;
        let student = w.student.ok_or_else(|| {
            PyValueError::new_err(format!("{} holds no student weights", path.display()))
        })?;
        let cfg = RunConfig::from_json_str(&ck.manifest.config.to_string(), "checkpoint")
            .map_err(to_py)?;
        let models = Models::new(&cfg).map_err(to_py)?;
        Ok(Self {
            cfg,
            models,
            student,
            phase: ck.manifest.phase,
        })
    }

    #[getter]
    fn phase(&self) -> &str {
        &self.phase
    }

    #[getter]
    fn clip_shape(&self) -> Vec<usize> {
        self.models.backbone.geo.clip_shape().to_vec()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.cfg.clone(),
        }
    }

    /// Held-out clips generated with `nfe` evaluations, each flat.
    #[pyo3(signature = (nfe=1))]
    fn sample(&self, nfe: usize) -> PyResult<Vec<Vec<f64>>> {
        let set = EvalSet::build(&self.cfg).map_err(to_py)?;
        let clips =
            experiments::student_samples(&self.models, &self.student, &set, nfe).map_err(to_py)?;
        Ok(clips.into_iter().map(Array::into_data).collect())
    }

    /// `(toy_frechet, lip_sync, heatmap_mass)` of `nfe`-evaluation samples.
    #[pyo3(signature = (nfe=1))]
    fn evaluate(&self, nfe: usize) -> PyResult<(f64, f64, f64)> {
        let set = EvalSet::build(&self.cfg).map_err(to_py)?;
        let clips =
            experiments::student_samples(&self.models, &self.student, &set, nfe).map_err(to_py)?;
        let geo = self.models.backbone.geo;
        let proj = Projection::new(
            geo.frame_size() * self.cfg.data.frames,
            self.cfg.eval.projection_dim,
            self.cfg.eval.projection_seed,
        );
        let s = experiments::score_method(&self.phase, nfe, &clips, &set, &proj, &self.cfg)
            .map_err(to_py)?;
        Ok((s.toy_frechet, s.lip_sync, s.heatmap_mass))
    }
}

#[pymodule]
fn pyavatar_lcm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(huber, m)?)?;
    m.add_function(wrap_pyfunction!(disc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(adv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(motion_loss, m)?)?;
    m.add_function(wrap_pyfunction!(progressive_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(editing_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
