use std::path::PathBuf;

use mapformer_core::diffcore::Tensor;
use mapformer_core::interaction::{self, ModeChoice};
use mapformer_core::metrics;
use mapformer_core::model::MapFormer;
use mapformer_core::paircov::{self, PairCovariance};
use mapformer_core::pipeline::{self, RunConfig, DEFAULT_STRIDE};
use mapformer_core::selfcheck::{run_gradcheck, GradcheckOptions};
use mapformer_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Validation(_) | Error::Config(_) | Error::Dimension { .. } => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

type Mat4 = [[f64; 4]; 4];

/// Agent-pair covariance parameters: 4 positive standard deviations and the 6
/// strictly-lower entries of the unit lower-triangular factor.
#[pyclass(name = "CovParams", frozen)]
struct PyCovParams(paircov::CovParams);

#[pymethods]
impl PyCovParams {
    #[new]
    fn new(sigma_hat: [f64; 4], lower: [f64; 6]) -> PyResult<Self> {
        paircov::CovParams::new(sigma_hat, lower)
            .map(Self)
            .map_err(py_err)
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.to_array().to_vec()
    }

    /// The 4x4 covariance over (x_i, y_i, x_j, y_j).
    fn sigma(&self) -> PyResult<Mat4> {
        paircov::build_sigma(&self.0).map(|c| c.sigma).map_err(py_err)
    }

    fn mgnll(&self, mu: [f64; 4], x: [f64; 4]) -> f64 {
        paircov::mgnll(&self.0, &mu, &x)
    }

    /// Returns (value, d/dparams, d/dmu).
    fn mgnll_grad(&self, mu: [f64; 4], x: [f64; 4]) -> (f64, [f64; 10], [f64; 4]) {
        paircov::mgnll_grad(&self.0, &mu, &x)
    }

    fn density(&self, mu: [f64; 4], x: [f64; 4]) -> f64 {
        paircov::density(&self.0, &mu, &x)
    }

    #[pyo3(signature = (mu, n, seed=0))]
    fn sample(&self, mu: [f64; 4], n: usize, seed: u64) -> Vec<[f64; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| paircov::sample(&self.0, &mu, &mut rng)).collect()
    }

    fn dependency_score(&self) -> PyResult<f64> {
        paircov::build_sigma(&self.0)
            .map(|c| interaction::dependency_score(&c))
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("CovParams({:?})", self.0.to_array())
    }
}

/// Frobenius norm of the off-diagonal 2x2 block of a pair covariance.
#[pyfunction]
fn dependency_score(sigma: Mat4) -> f64 {
    interaction::dependency_score(&PairCovariance { sigma })
}

fn track_tensor(agents: &[Vec<[f64; 2]>], data: &mut Vec<f64>) -> PyResult<(usize, usize)> {
    let t = agents.first().map_or(0, Vec::len);
    if agents.iter().any(|a| a.len() != t) {
        return Err(PyValueError::new_err("ragged trajectory array"));
    }
    data.extend(agents.iter().flatten().flatten());
    Ok((agents.len(), t))
}

/// minSADE, minSFDE and miss flag for predictions [M][A][T][2] against
/// ground truth [A][T][2].
#[pyfunction]
fn scene_metrics(pred: Vec<Vec<Vec<[f64; 2]>>>, gt: Vec<Vec<[f64; 2]>>) -> PyResult<(f64, f64, bool)> {
    let mut g = Vec::new();
    let (a, t) = track_tensor(&gt, &mut g)?;
    let mut p = Vec::new();
    for mode in &pred {
        if track_tensor(mode, &mut p)? != (a, t) {
            return Err(PyValueError::new_err("prediction and ground truth shapes differ"));
        }
    }
    let pred = Tensor::new(vec![pred.len(), a, t, 2], p).map_err(py_err)?;
    let gt = Tensor::new(vec![a, t, 2], g).map_err(py_err)?;
    let v = metrics::SceneView::new(&pred, &gt, None).map_err(py_err)?;
    let s = metrics::scene_metrics(&v);
    Ok((s.min_sade, s.min_sfde, s.miss))
}

#[pyclass(name = "Model", frozen)]
struct PyModel(MapFormer);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::load_model(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.to_checkpoint().save(&path).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.params.values().iter().map(|t| t.data().len()).sum()
    }

    #[getter]
    fn horizon_steps(&self) -> usize {
        self.0.cfg.t_f
    }

    /// Model hyperparameters as JSON.
    #[getter]
    fn config(&self) -> String {
        self.0.to_checkpoint().meta
    }
}

fn report<'py>(py: Python<'py>, r: &metrics::MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("horizon_s", r.horizon_s)?;
    d.set_item("min_sade", r.min_sade)?;
    d.set_item("min_sfde", r.min_sfde)?;
    d.set_item("smr", r.smr)?;
    d.set_item("n_scenes", r.n_scenes)?;
    Ok(d)
}

#[pyfunction]
fn generate(config: PathBuf, out: PathBuf) -> PyResult<()> {
    let cfg = RunConfig::load(&config).map_err(py_err)?;
    pipeline::generate(&cfg, &out).map_err(py_err)
}

/// Trains from a config file; returns the per-epoch mean MGNLL.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf, out: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = RunConfig::load(&config).map_err(py_err)?;
    let res = py.detach(|| pipeline::train(&cfg, &out)).map_err(py_err)?;
    Ok(res.log.iter().map(|e| e.mean_mgnll).collect())
}

/// Returns {"model": report, "baseline": report}.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, horizon, stride=DEFAULT_STRIDE))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    data: PathBuf,
    horizon: f64,
    stride: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let ev = py
        .detach(|| pipeline::evaluate(&checkpoint, &data, horizon, stride))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("model", report(py, &ev.model)?)?;
    d.set_item("baseline", report(py, &ev.baseline)?)?;
    Ok(d)
}

/// Writes dependency scores and plots; returns (n_scenes, n_records, auc).
#[pyfunction]
#[pyo3(signature = (checkpoint, data, out, stride=DEFAULT_STRIDE, weighted=false))]
fn analyze(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    stride: usize,
    weighted: bool,
) -> PyResult<(usize, usize, Option<f64>)> {
    let choice = if weighted {
        ModeChoice::ProbabilityWeighted
    } else {
        ModeChoice::BestSfde
    };
    let s = py
        .detach(|| pipeline::analyze(&checkpoint, &data, &out, stride, choice))
        .map_err(py_err)?;
    Ok((s.n_scenes, s.n_records, s.auc))
}

/// Finite-difference checks as (name, rel_err, tol, passed).
#[pyfunction]
#[pyo3(signature = (corrupt_softplus=false))]
fn gradcheck(py: Python<'_>, corrupt_softplus: bool) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let rep = py
        .detach(|| run_gradcheck(&GradcheckOptions { corrupt_softplus }))
        .map_err(py_err)?;
    Ok(rep
        .checks
        .iter()
        .map(|c| (c.name.clone(), c.rel_err, c.tol, c.passed()))
        .collect())
}

#[pymodule]
fn mapformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCovParams>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dependency_score, m)?)?;
    m.add_function(wrap_pyfunction!(scene_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
