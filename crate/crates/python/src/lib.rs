//! Python bindings: schedules, posterior kernels, metrics, slerp and the
//! staged run directory.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyRuntimeError;
use pyo3::prelude::*;

use betaspec::data::{Dataset, FactorSpec};
use betaspec::harness::{Run, RunConfig};
use betaspec::math::kernels;
use betaspec::metrics::{self, RepresentationTable};
use betaspec::{Error, Schedule, ShapeTag};

create_exception!(betaspec_py, BetaspecError, PyRuntimeError);
create_exception!(betaspec_py, PrerequisiteError, BetaspecError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingPrerequisite(m) => PrerequisiteError::new_err(m),
        other => BetaspecError::new_err(other.to_string()),
    }
}

fn make_schedule(shape: &str, n_steps: usize, sigma_max: f64, power: f64, horizon: f64) -> PyResult<Schedule> {
    match shape {
        "linear" => Schedule::linear(n_steps, horizon, sigma_max),
        "sched1" => Schedule::sched1(n_steps, horizon, sigma_max, power),
        "sched2" => Schedule::sched2(n_steps, horizon, sigma_max, power),
        other => return Err(BetaspecError::new_err(format!("unknown schedule shape `{other}`"))),
    }
    .map_err(py_err)
}

fn table_from(sigmas: Vec<f64>, horizon: f64) -> PyResult<Schedule> {
    let n = sigmas.len().saturating_sub(1);
    Schedule::new(n, horizon, sigmas, ShapeTag::Learned).map_err(py_err)
}

/// σ values on the grid `0..=n_steps` for shape `linear`, `sched1` or `sched2`.
#[pyfunction]
#[pyo3(signature = (shape, n_steps, sigma_max, power = 1.0, horizon = 1.0))]
fn schedule(shape: &str, n_steps: usize, sigma_max: f64, power: f64, horizon: f64) -> PyResult<Vec<f64>> {
    Ok(make_schedule(shape, n_steps, sigma_max, power, horizon)?.sigmas().to_vec())
}

/// Mean and variance of `q(z_{t−τ} | z_t, x)` for the σ table `sigmas`.
#[pyfunction]
#[pyo3(signature = (z_t, x, sigmas, i, horizon = 1.0))]
fn linear_posterior(z_t: Vec<f64>, x: Vec<f64>, sigmas: Vec<f64>, i: usize, horizon: f64) -> PyResult<(Vec<f64>, f64)> {
    let p = kernels::linear_posterior(&z_t, &x, &table_from(sigmas, horizon)?, i).map_err(py_err)?;
    Ok((p.mean, p.variance))
}

/// Posterior of the encoder-driven process, shifted by `f_prev − f_cur`.
#[pyfunction]
#[pyo3(signature = (z_t, x, f_prev, f_cur, sigmas, i, horizon = 1.0))]
fn nonlinear_posterior(
    z_t: Vec<f64>,
    x: Vec<f64>,
    f_prev: Vec<f64>,
    f_cur: Vec<f64>,
    sigmas: Vec<f64>,
    i: usize,
    horizon: f64,
) -> PyResult<(Vec<f64>, f64)> {
    let p = kernels::nonlinear_posterior(&z_t, &x, &f_prev, &f_cur, &table_from(sigmas, horizon)?, i).map_err(py_err)?;
    Ok((p.mean, p.variance))
}

#[pyfunction]
fn slerp(z1: Vec<f64>, z2: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    betaspec::latent::slerp(&z1, &z2, alpha).map_err(py_err)
}

fn rep_table(codes: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, attributes: Vec<Vec<bool>>) -> PyResult<RepresentationTable> {
    let d = codes.first().map_or(0, Vec::len);
    RepresentationTable::new(codes.concat(), d, factors, attributes).map_err(py_err)
}

/// Mutual information gap of `codes` (one row per item) against discrete factors.
#[pyfunction]
#[pyo3(signature = (codes, factors, attributes, bins = metrics::DEFAULT_BINS))]
fn mig(codes: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, attributes: Vec<Vec<bool>>, bins: usize) -> PyResult<f64> {
    metrics::mig(&rep_table(codes, factors, attributes)?, bins).map_err(py_err)
}

#[pyfunction]
fn dci_disentanglement(codes: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, attributes: Vec<Vec<bool>>) -> PyResult<f64> {
    metrics::dci_disentanglement(&rep_table(codes, factors, attributes)?).map_err(py_err)
}

/// TAD score and the number of captured attributes.
#[pyfunction]
#[pyo3(signature = (codes, factors, attributes, capture_threshold = metrics::DEFAULT_CAPTURE_THRESHOLD))]
fn tad(codes: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, attributes: Vec<Vec<bool>>, capture_threshold: f64) -> PyResult<(f64, usize)> {
    metrics::tad(&rep_table(codes, factors, attributes)?, capture_threshold).map_err(py_err)
}

type SpriteRows = (Vec<Vec<f64>>, Vec<Vec<usize>>, Vec<Vec<bool>>);

/// The default sprite dataset as `(images, factors, attributes)`, one row per image.
#[pyfunction]
fn sprite_dataset() -> PyResult<SpriteRows> {
    let data = Dataset::generate(FactorSpec::default()).map_err(py_err)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let images = data.images.chunks(data.dim()).map(<[f64]>::to_vec).collect();
    let attrs = data.attributes(&all).iter().map(|a| a.values().to_vec()).collect();
    Ok((images, data.factor_labels(&all), attrs))
}

/// A locked run directory. Stage methods return the one-line summary the
/// CLI prints. `close()` releases the lock.
#[pyclass]
struct RunDir {
    run: Option<Run>,
}

impl RunDir {
    fn run(&mut self) -> PyResult<&mut Run> {
        self.run.as_mut().ok_or_else(|| BetaspecError::new_err("run directory is closed"))
    }
}

#[pymethods]
impl RunDir {
    /// Open `path`, taking the config from `config` (TOML text), else
    /// `path/config.toml`, else the defaults.
    #[new]
    #[pyo3(signature = (path, config = None))]
    fn new(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let existing = path.join("config.toml");
        let mut cfg = match config {
            Some(text) => RunConfig::from_toml(text).map_err(py_err)?,
            None if existing.exists() => RunConfig::load(&existing).map_err(py_err)?,
            None => RunConfig::default(),
        };
        cfg.out_dir = path;
        Ok(RunDir {
            run: Some(Run::open(cfg).map_err(py_err)?),
        })
    }

    #[getter]
    fn config_hash(&mut self) -> PyResult<String> {
        Ok(self.run()?.hash.clone())
    }

    fn gen_data(&mut self) -> PyResult<String> {
        self.run()?.gen_data().map_err(py_err)
    }

    fn train_vae(&mut self) -> PyResult<String> {
        self.run()?.train_vae().map_err(py_err)
    }

    fn train_diff(&mut self) -> PyResult<String> {
        self.run()?.train_diff().map_err(py_err)
    }

    #[pyo3(signature = (n = 16, seed = 0, trace = false))]
    fn sample(&mut self, n: usize, seed: u64, trace: bool) -> PyResult<String> {
        self.run()?.sample(n, seed, trace).map_err(py_err)
    }

    #[pyo3(signature = (beta_index, n = 8, seed = 0))]
    fn denoise(&mut self, beta_index: usize, n: usize, seed: u64) -> PyResult<String> {
        self.run()?.denoise(beta_index, n, seed).map_err(py_err)
    }

    fn evaluate(&mut self, beta_index: usize) -> PyResult<String> {
        self.run()?.evaluate(beta_index).map_err(py_err)
    }

    #[pyo3(signature = (stride = 1))]
    fn sweep_beta(&mut self, stride: usize) -> PyResult<String> {
        self.run()?.sweep_beta(stride).map_err(py_err)
    }

    fn report(&mut self) -> PyResult<String> {
        self.run()?.report().map_err(py_err)
    }

    fn close(&mut self) {
        self.run = None;
    }
}

#[pymodule]
fn betaspec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BetaspecError", m.py().get_type::<BetaspecError>())?;
    m.add("PrerequisiteError", m.py().get_type::<PrerequisiteError>())?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(linear_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(nonlinear_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(slerp, m)?)?;
    m.add_function(wrap_pyfunction!(mig, m)?)?;
    m.add_function(wrap_pyfunction!(dci_disentanglement, m)?)?;
    m.add_function(wrap_pyfunction!(tad, m)?)?;
    m.add_function(wrap_pyfunction!(sprite_dataset, m)?)?;
    m.add_class::<RunDir>()?;
    Ok(())
}
