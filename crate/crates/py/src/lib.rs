//! Python module `turbo`: discrete oracle, verification battery, data
//! sampling and toy training runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use turbo_core::checkpoint::Checkpoint;
use turbo_core::cli::{oracle_eval, system_to_toml};
use turbo_core::config::TrainConfig;
use turbo_core::data::sample;
use turbo_core::finite_prob::{self, FiniteDist, FiniteJoint, StochasticKernel};
use turbo_core::metrics::{evaluate_run, ks_distance as core_ks};
use turbo_core::oracle::{self, DiscretePreset, IbnWeights, TurboSystem, TurboWeights};
use turbo_core::rng::Prng;
use turbo_core::train::{self, RunOptions, RunState};
use turbo_core::verify::{run_verify, VerifyConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Serialises to JSON and hands back Python objects.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn rows_of(rows: impl Iterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    rows.collect()
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    Ok(finite_prob::entropy(&FiniteDist::new(p).map_err(value_err)?))
}

#[pyfunction]
fn kld(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let (p, q) = (FiniteDist::new(p).map_err(value_err)?, FiniteDist::new(q).map_err(value_err)?);
    finite_prob::kld(&p, &q).map_err(value_err)
}

#[pyfunction]
fn cross_entropy(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let (p, q) = (FiniteDist::new(p).map_err(value_err)?, FiniteDist::new(q).map_err(value_err)?);
    finite_prob::cross_entropy(&p, &q).map_err(value_err)
}

/// `I(X; Z)` of a joint given as `joint[x][z]`.
#[pyfunction]
fn mutual_information(joint: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(finite_prob::mutual_information(&FiniteJoint::from_rows(joint).map_err(value_err)?))
}

#[pyfunction]
fn ks_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    core_ks(&a, &b).map_err(value_err)
}

/// Joint `p(x, z)`, encoder `q(z|x)` and decoder `p(x|z)` on finite
/// alphabets.
#[pyclass(name = "TurboSystem", module = "turbo")]
struct PySystem {
    inner: TurboSystem,
}

#[pymethods]
impl PySystem {
    #[new]
    #[pyo3(signature = (joint, enc=None, dec=None))]
    fn new(joint: Vec<Vec<f64>>, enc: Option<Vec<Vec<f64>>>, dec: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let joint = FiniteJoint::from_rows(joint).map_err(value_err)?;
        let inner = match (enc, dec) {
            (None, None) => TurboSystem::with_true_conditionals(joint).map_err(value_err)?,
            (Some(e), Some(d)) => TurboSystem::new(
                joint,
                StochasticKernel::from_rows(e).map_err(value_err)?,
                StochasticKernel::from_rows(d).map_err(value_err)?,
            )
            .map_err(value_err)?,
            _ => return Err(PyValueError::new_err("give both enc and dec, or neither")),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random(seed: u64, n_x: usize, n_z: usize) -> PyResult<Self> {
        if n_x == 0 || n_z == 0 {
            return Err(PyValueError::new_err("alphabet sizes must be at least 1"));
        }
        Ok(Self {
            inner: TurboSystem::random(&mut Prng::new(seed), n_x, n_z),
        })
    }

    #[getter]
    fn joint(&self) -> Vec<Vec<f64>> {
        let j = self.inner.joint();
        rows_of((0..j.n_x()).map(|x| (0..j.n_z()).map(|z| j.get(x, z)).collect()))
    }

    #[getter]
    fn enc(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.enc().rows().map(<[f64]>::to_vec))
    }

    #[getter]
    fn dec(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.dec().rows().map(<[f64]>::to_vec))
    }

    fn transposed(&self) -> Self {
        Self {
            inner: self.inner.transposed(),
        }
    }

    /// The eight terms plus informations and bounds, as a dict.
    fn terms(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &oracle::eight_terms(&self.inner).map_err(value_err)?)
    }

    #[pyo3(signature = (lambda_d=1.0, lambda_r=1.0, lambda_t=1.0))]
    fn turbo_loss(&self, lambda_d: f64, lambda_r: f64, lambda_t: f64) -> PyResult<(f64, f64, f64)> {
        let w = TurboWeights::new(lambda_d, lambda_r, lambda_t).map_err(value_err)?;
        let s = &self.inner;
        Ok((
            oracle::turbo_direct(s, &w).map_err(value_err)?,
            oracle::turbo_reverse(s, &w).map_err(value_err)?,
            oracle::turbo_total(s, &w).map_err(value_err)?,
        ))
    }

    #[pyo3(signature = (name, lambda_d=1.0, lambda_r=1.0, lambda_t=1.0))]
    fn preset_loss(&self, name: &str, lambda_d: f64, lambda_r: f64, lambda_t: f64) -> PyResult<f64> {
        let p: DiscretePreset = name.parse().map_err(value_err)?;
        let w = TurboWeights::new(lambda_d, lambda_r, lambda_t).map_err(value_err)?;
        oracle::preset_loss(&self.inner, p, &w).map_err(value_err)
    }

    /// Returns `(direct form, via the bound)`.
    #[pyo3(signature = (lambda_b=1.0, lambda_info=0.0, lambda_s=1.0))]
    fn bibae_loss(&self, lambda_b: f64, lambda_info: f64, lambda_s: f64) -> PyResult<(f64, f64)> {
        let w = IbnWeights {
            lambda_b,
            lambda_info,
            lambda_s,
        };
        w.validate().map_err(value_err)?;
        Ok((
            oracle::bibae_loss(&self.inner, &w).map_err(value_err)?,
            oracle::bibae_loss_via_bound(&self.inner, &w).map_err(value_err)?,
        ))
    }

    /// Everything `turbo oracle eval --json` prints, with default weights.
    fn evaluate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = oracle_eval(&self.inner, &TurboWeights::default(), &IbnWeights::default()).map_err(value_err)?;
        to_py(py, &out)
    }

    fn to_toml(&self) -> String {
        system_to_toml(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("TurboSystem({} x {})", self.inner.joint().n_x(), self.inner.joint().n_z())
    }
}

/// Runs the property battery and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (trials=1000, seed=0, min_size=2, max_size=8, perturbations=100))]
fn verify(
    py: Python<'_>,
    trials: usize,
    seed: u64,
    min_size: usize,
    max_size: usize,
    perturbations: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = VerifyConfig {
        trials,
        seed,
        min_size,
        max_size,
        perturbations,
        fault: None,
    };
    let report = py.detach(|| run_verify(&cfg)).map_err(value_err)?;
    to_py(py, &report)
}

fn parse_config(text: &str) -> PyResult<TrainConfig> {
    TrainConfig::from_toml(text).map_err(value_err)
}

/// Draws `n` rows of the config's dataset; returns `(x, z)` as nested lists.
#[pyfunction]
fn sample_data(config: &str, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = parse_config(config)?;
    let b = sample(&c.data, n, seed).map_err(value_err)?;
    let rows = |t: &turbo_core::autodiff::Tensor| rows_of((0..t.rows()).map(|i| t.row(i).to_vec()));
    Ok((rows(&b.x), rows(&b.z)))
}

/// In-memory training run built from TOML text.
#[pyclass(name = "Run", module = "turbo")]
struct PyRun {
    state: RunState,
}

#[pymethods]
impl PyRun {
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        let c = parse_config(config)?;
        Ok(Self {
            state: train::build_run(&c).map_err(value_err)?,
        })
    }

    /// Restores from a checkpoint's text.
    #[staticmethod]
    fn restore(config: &str, checkpoint: &str) -> PyResult<Self> {
        let c = parse_config(config)?;
        let ck = Checkpoint::parse(checkpoint).map_err(value_err)?;
        Ok(Self {
            state: train::restore(&c, ck).map_err(value_err)?,
        })
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn preset(&self) -> String {
        self.state.config.run.preset.to_string()
    }

    /// One training step; returns its loss record.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let state = &mut self.state;
        let r = py.detach(|| train::train_step(state)).map_err(runtime_err)?;
        to_py(py, &r)
    }

    fn train(&mut self, py: Python<'_>, steps: usize) -> PyResult<()> {
        let state = &mut self.state;
        py.detach(|| train::train(state, steps)).map_err(runtime_err)
    }

    #[pyo3(signature = (samples=None, seed=None))]
    fn evaluate(&self, py: Python<'_>, samples: Option<usize>, seed: Option<u64>) -> PyResult<Py<PyAny>> {
        let mut eval = self.state.config.eval;
        if let Some(n) = samples {
            eval.samples = n;
        }
        if let Some(s) = seed {
            eval.seed = s;
        }
        let rec = py.detach(|| evaluate_run(&self.state, &eval)).map_err(runtime_err)?;
        to_py(py, &rec)
    }

    fn checkpoint(&self) -> String {
        train::checkpoint(&self.state).to_text()
    }

    /// Resolved config as TOML.
    fn config(&self) -> String {
        self.state.config.to_toml()
    }
}

/// Trains into a run directory as `turbo train` does. Returns the summary
/// dict, or `None` when stopped early by `max_steps`.
#[pyfunction]
#[pyo3(signature = (out, config=None, resume=false, max_steps=None, overwrite=false))]
fn train_run(
    py: Python<'_>,
    out: PathBuf,
    config: Option<&str>,
    resume: bool,
    max_steps: Option<usize>,
    overwrite: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = config.map(parse_config).transpose()?;
    let opts = RunOptions {
        resume,
        max_steps,
        overwrite,
    };
    let outcome = py.detach(|| train::train_run(cfg.as_ref(), &out, &opts)).map_err(runtime_err)?;
    to_py(py, &outcome.summary)
}

#[pymodule]
fn turbo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kld, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(ks_distance, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(sample_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    Ok(())
}
