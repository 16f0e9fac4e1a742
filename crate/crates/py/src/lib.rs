//! Python bindings: tabular MDPs, the exact oracle, the actor-critic run and
//! the validation suites.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mlmc_nac::harness::config::ExperimentConfig;
use mlmc_nac::harness::{ratefit, run, validate};
use mlmc_nac::mdp::{self, cosine_features, reduced_one_hot_features};
use mlmc_nac::{
    derive_hyperparameters, mlmc, oracle, Error, FeatureMap, HyperParams, Overrides, PolicyClass,
    PolicyParams, RngStream, RunOptions, TabularMdp,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Argument(_)
        | Error::Config(_)
        | Error::Parse { .. }
        | Error::Validation { .. }
        | Error::Index { .. }
        | Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

/// A finite MDP with rewards in `[0, 1]`.
#[pyclass(name = "Mdp", module = "mlmc_nac", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMdp {
    inner: TabularMdp,
}

#[pymethods]
impl PyMdp {
    /// `reward[s][a]`, `transition[s][a][s']`, `initial[s]`.
    #[new]
    fn new(reward: Vec<Vec<f64>>, transition: Vec<Vec<Vec<f64>>>, initial: Vec<f64>) -> PyResult<Self> {
        let s = reward.len();
        let a = reward.first().map_or(0, Vec::len);
        let inner = TabularMdp::new(
            s,
            a,
            reward.into_iter().flatten().collect(),
            transition.into_iter().flatten().flatten().collect(),
            initial,
        )
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (states, actions, seed, self_loop_min = 0.05))]
    fn random(states: usize, actions: usize, seed: u64, self_loop_min: f64) -> PyResult<Self> {
        let inner = mdp::generate_random_ergodic(states, actions, self_loop_min, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TabularMdp::from_json(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: mdp::load_mdp(path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mdp::save_mdp(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    /// Length of the tabular policy parameter, `S (A - 1)`.
    #[getter]
    fn theta_dim(&self) -> usize {
        self.class().dim()
    }

    fn reward(&self, s: usize, a: usize) -> f64 {
        self.inner.reward(s, a)
    }

    fn __repr__(&self) -> String {
        format!("Mdp(states={}, actions={})", self.inner.n_states(), self.inner.n_actions())
    }
}

impl PyMdp {
    fn class(&self) -> PolicyClass {
        PolicyClass::tabular(self.inner.n_states(), self.inner.n_actions())
    }

    fn theta(&self, theta: Option<Vec<f64>>) -> PyResult<PolicyParams> {
        let dim = self.class().dim();
        let theta = match theta {
            None => PolicyParams::zeros(dim),
            Some(v) => PolicyParams::from_slice(&v).map_err(py_err)?,
        };
        if theta.dim() != dim {
            return Err(PyValueError::new_err(format!(
                "theta has length {}, expected {dim}",
                theta.dim()
            )));
        }
        Ok(theta)
    }
}

/// `None` for reduced one-hot features, an int `m` for `m` cosine features,
/// or a list of rows.
fn features_for(mdp: &TabularMdp, spec: Option<&Bound<'_, PyAny>>) -> PyResult<FeatureMap> {
    let s = mdp.n_states();
    let Some(spec) = spec.filter(|v| !v.is_none()) else {
        return reduced_one_hot_features(s).map_err(py_err);
    };
    if let Ok(m) = spec.extract::<usize>() {
        return if m == 0 {
            Ok(FeatureMap::empty(s))
        } else {
            cosine_features(s, m).map_err(py_err)
        };
    }
    let table: Vec<Vec<f64>> = spec.extract()?;
    if table.len() != s {
        return Err(PyValueError::new_err(format!("features need {s} rows, got {}", table.len())));
    }
    let m = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged feature table"));
    }
    FeatureMap::compliant(DMatrix::from_fn(s, m, |i, j| table[i][j])).map_err(py_err)
}

/// Exact evaluation of the tabular softmax policy `theta` (zeros if omitted).
#[pyfunction]
#[pyo3(signature = (mdp, theta = None))]
fn evaluate<'py>(py: Python<'py>, mdp: &PyMdp, theta: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let class = mdp.class();
    let theta = mdp.theta(theta)?;
    let eval = oracle::evaluate_params(&mdp.inner, &class, &theta).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("gain", eval.gain)?;
    out.set_item("stationary", vec_of(&eval.stationary))?;
    out.set_item("v", vec_of(&eval.v))?;
    out.set_item("q", rows(&eval.q))?;
    out.set_item("advantage", rows(&eval.advantage))?;
    out.set_item("occupancy", rows(&eval.occupancy))?;
    Ok(out)
}

/// Optimal average reward `J*`.
#[pyfunction]
fn optimal_gain(mdp: &PyMdp) -> PyResult<f64> {
    Ok(oracle::optimal_gain(&mdp.inner).map_err(py_err)?.0)
}

#[pyfunction]
#[pyo3(signature = (mdp, theta = None))]
fn policy_gradient(mdp: &PyMdp, theta: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let theta = mdp.theta(theta)?;
    let g = oracle::exact_policy_gradient(&mdp.inner, &mdp.class(), &theta).map_err(py_err)?;
    Ok(vec_of(&g))
}

/// `F^+ grad J` at `theta`.
#[pyfunction]
#[pyo3(signature = (mdp, theta = None))]
fn npg_direction(mdp: &PyMdp, theta: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let theta = mdp.theta(theta)?;
    let w = oracle::exact_npg(&mdp.inner, &mdp.class(), &theta).map_err(py_err)?;
    Ok(vec_of(&w))
}

#[pyfunction]
#[pyo3(signature = (mdp, theta = None))]
fn fisher_matrix(mdp: &PyMdp, theta: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let theta = mdp.theta(theta)?;
    let f = oracle::fisher_matrix(&mdp.inner, &mdp.class(), &theta).map_err(py_err)?;
    Ok(rows(&f))
}

/// Exact TD fixed point `[eta*, zeta*]` of the linear critic.
#[pyfunction]
#[pyo3(signature = (mdp, theta = None, features = None, c_beta = 1.0))]
fn td_fixed_point(
    mdp: &PyMdp,
    theta: Option<Vec<f64>>,
    features: Option<&Bound<'_, PyAny>>,
    c_beta: f64,
) -> PyResult<Vec<f64>> {
    let theta = mdp.theta(theta)?;
    let features = features_for(&mdp.inner, features)?;
    let fp = oracle::td_fixed_point(&mdp.inner, &mdp.class(), &theta, &features, c_beta).map_err(py_err)?;
    Ok(vec_of(&fp.xi))
}

/// Analysis constants at `theta`: lambda, mu, eps_app, t_mix, G1 and the
/// `c_beta` threshold.
#[pyfunction]
#[pyo3(signature = (mdp, theta = None, features = None, c_beta = None))]
fn assumption_report<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    theta: Option<Vec<f64>>,
    features: Option<&Bound<'_, PyAny>>,
    c_beta: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let theta = mdp.theta(theta)?;
    let features = features_for(&mdp.inner, features)?;
    let r = oracle::assumption_report(&mdp.inner, &theta, &features, &mdp.class(), c_beta)
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("lambda_min", r.lambda_min)?;
    out.set_item("mu_min", r.mu_min)?;
    out.set_item("eps_app", r.eps_app)?;
    out.set_item("t_mix", r.t_mix)?;
    out.set_item("g1_bound", r.g1_bound)?;
    out.set_item("c_beta_threshold", r.c_beta_threshold)?;
    Ok(out)
}

#[pyfunction]
fn c_beta_threshold(lambda_: f64) -> f64 {
    oracle::c_beta_threshold(lambda_)
}

/// Expected transitions per MLMC assembly, `log2(T_max) + 1/T_max`.
#[pyfunction]
fn mlmc_expected_cost(t_max: usize) -> PyResult<f64> {
    mlmc::expected_cost(t_max).map_err(py_err)
}

/// Step sizes and loop sizes of the actor-critic.
#[pyclass(name = "HyperParams", module = "mlmc_nac", frozen, get_all, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyHyperParams {
    alpha: f64,
    beta: f64,
    gamma: f64,
    c_beta: f64,
    t_max: usize,
    h_inner: usize,
    k_outer: usize,
}

impl From<HyperParams> for PyHyperParams {
    fn from(h: HyperParams) -> Self {
        Self {
            alpha: h.alpha,
            beta: h.beta,
            gamma: h.gamma,
            c_beta: h.c_beta,
            t_max: h.t_max,
            h_inner: h.h_inner,
            k_outer: h.k_outer,
        }
    }
}

impl From<PyHyperParams> for HyperParams {
    fn from(h: PyHyperParams) -> Self {
        Self {
            alpha: h.alpha,
            beta: h.beta,
            gamma: h.gamma,
            c_beta: h.c_beta,
            t_max: h.t_max,
            h_inner: h.h_inner,
            k_outer: h.k_outer,
        }
    }
}

#[pymethods]
impl PyHyperParams {
    #[new]
    fn new(alpha: f64, beta: f64, gamma: f64, c_beta: f64, t_max: usize, h_inner: usize, k_outer: usize) -> PyResult<Self> {
        let hp = HyperParams {
            alpha,
            beta,
            gamma,
            c_beta,
            t_max,
            h_inner,
            k_outer,
        };
        hp.validate().map_err(py_err)?;
        Ok(hp.into())
    }

    fn __repr__(&self) -> String {
        format!(
            "HyperParams(alpha={}, beta={}, gamma={}, c_beta={}, t_max={}, h_inner={}, k_outer={})",
            self.alpha, self.beta, self.gamma, self.c_beta, self.t_max, self.h_inner, self.k_outer
        )
    }
}

/// Derives the hyperparameters at `theta` from the oracle constants.
/// `overrides` is a dict with any of the keys accepted in a run config.
#[pyfunction]
#[pyo3(signature = (mdp, t_budget = None, theta = None, features = None, overrides = None))]
fn derive_hyperparams(
    mdp: &PyMdp,
    t_budget: Option<u64>,
    theta: Option<Vec<f64>>,
    features: Option<&Bound<'_, PyAny>>,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyHyperParams> {
    let theta = mdp.theta(theta)?;
    let features = features_for(&mdp.inner, features)?;
    let overrides = parse_overrides(overrides)?;
    let class = mdp.class();
    let report = oracle::assumption_report(&mdp.inner, &theta, &features, &class, overrides.c_beta)
        .map_err(py_err)?;
    let smoothness = if overrides.alpha.is_none() && overrides.smoothness.is_none() {
        let mut rng = RngStream::new(0);
        Some(oracle::smoothness_probe(&mdp.inner, &class, &theta, 1.0, 100, &mut rng).map_err(py_err)?)
    } else {
        None
    };
    let hp = derive_hyperparameters(t_budget, &report, &overrides, smoothness).map_err(py_err)?;
    Ok(hp.into())
}

fn parse_overrides(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Overrides> {
    let Some(d) = overrides else {
        return Ok(Overrides::default());
    };
    let json = d.py().import("json")?.call_method1("dumps", (d,))?;
    serde_json::from_str(json.extract::<&str>()?)
        .map_err(|e| PyValueError::new_err(format!("overrides: {e}")))
}

/// Runs the actor-critic for one seed. Returns a dict with the per-epoch
/// records, the parameter after every epoch and the oracle gap values.
#[pyfunction]
#[pyo3(signature = (mdp, hyperparams, seed, theta0 = None, features = None, probe_every = 1, warm_start = false))]
#[allow(clippy::too_many_arguments)]
fn run_nac<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    hyperparams: &PyHyperParams,
    seed: u64,
    theta0: Option<Vec<f64>>,
    features: Option<&Bound<'_, PyAny>>,
    probe_every: usize,
    warm_start: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let theta0 = mdp.theta(theta0)?;
    let features = features_for(&mdp.inner, features)?;
    let class = mdp.class();
    let hp: HyperParams = (*hyperparams).into();
    hp.validate().map_err(py_err)?;
    let inner = &mdp.inner;
    let result = py.detach(|| -> Result<_, Error> {
        let probe = mlmc_nac::actor_critic::OracleProbe::new(inner, &class, &features)?;
        let options = RunOptions {
            probe: Some(&probe),
            probe_every,
            warm_start,
            refresh_constants: None,
        };
        let mut rng = RngStream::new(seed);
        Ok(match mlmc_nac::mlmc_nac(inner, &class, &theta0, &features, &hp, &mut rng, &options) {
            Ok(t) => (t, None),
            Err(aborted) => {
                let msg = aborted.to_string();
                (aborted.partial, Some(msg))
            }
        })
    });
    let (trace, error) = result.map_err(py_err)?;
    let out = PyDict::new(py);
    let records: Vec<Bound<'py, PyDict>> = trace
        .records
        .iter()
        .map(|r| -> PyResult<_> {
            let d = PyDict::new(py);
            d.set_item("k", r.k)?;
            d.set_item("cum_T", r.cum_t)?;
            d.set_item("J_theta", r.j_theta)?;
            d.set_item("gap", r.gap)?;
            d.set_item("xi_err", r.xi_err)?;
            d.set_item("omega_err", r.omega_err)?;
            d.set_item("epoch_transitions", r.epoch_transitions)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    out.set_item("records", records)?;
    out.set_item(
        "thetas",
        trace.thetas.iter().map(|t| t.as_slice().to_vec()).collect::<Vec<_>>(),
    )?;
    out.set_item("j_star", trace.j_star)?;
    out.set_item("final_gain", trace.final_gain)?;
    out.set_item("final_gap", trace.final_gap())?;
    out.set_item("mean_gap", trace.mean_gap())?;
    out.set_item("total_transitions", trace.total_transitions())?;
    out.set_item("error", error)?;
    Ok(out)
}

/// Runs a JSON experiment config and returns `summary.json` as a string.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: PathBuf) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    let summary = py.detach(|| run::run_experiment(&cfg)).map_err(py_err)?;
    serde_json::to_string_pretty(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Power-law fit of `y_col` against `x_col` pooled over trace CSVs.
/// Returns `(slope, intercept, r_squared)`.
#[pyfunction]
#[pyo3(signature = (paths, x_col, y_col, floor = None))]
fn rate_fit(paths: Vec<PathBuf>, x_col: &str, y_col: &str, floor: Option<f64>) -> PyResult<(f64, f64, f64)> {
    let fit = ratefit::rate_fit(&paths, x_col, y_col, floor).map_err(py_err)?;
    Ok((fit.slope, fit.intercept, fit.r_squared))
}

/// Power-law fit of raw arrays. Returns `(slope, intercept, r_squared)`.
#[pyfunction]
#[pyo3(signature = (xs, ys, floor = None))]
fn fit_power_law(xs: Vec<f64>, ys: Vec<f64>, floor: Option<f64>) -> PyResult<(f64, f64, f64)> {
    let fit = ratefit::fit_power_law(&xs, &ys, floor).map_err(py_err)?;
    Ok((fit.slope, fit.intercept, fit.r_squared))
}

/// MLMC suites. Returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (t_max = None, replicas = 100_000, cost_draws = 1_000_000))]
fn validate_mlmc(
    py: Python<'_>,
    t_max: Option<Vec<usize>>,
    replicas: usize,
    cost_draws: usize,
) -> PyResult<(bool, String)> {
    let mut suite = validate::MlmcSuite {
        replicas,
        cost_draws,
        ..Default::default()
    };
    if let Some(t) = t_max {
        suite.t_max = t;
    }
    let report = py.detach(|| validate::validate_mlmc(&suite)).map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

/// Linear recursion suites. Returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (replicas = 200))]
fn validate_linrec(py: Python<'_>, replicas: usize) -> PyResult<(bool, String)> {
    let suite = validate::LinrecSuite {
        replicas,
        ..Default::default()
    };
    let report = py.detach(|| validate::validate_linrec(&suite)).map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
#[pyo3(name = "mlmc_nac")]
fn mlmc_nac_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyHyperParams>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_gain, m)?)?;
    m.add_function(wrap_pyfunction!(policy_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(npg_direction, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(td_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(assumption_report, m)?)?;
    m.add_function(wrap_pyfunction!(c_beta_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(mlmc_expected_cost, m)?)?;
    m.add_function(wrap_pyfunction!(derive_hyperparams, m)?)?;
    m.add_function(wrap_pyfunction!(run_nac, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(rate_fit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(validate_mlmc, m)?)?;
    m.add_function(wrap_pyfunction!(validate_linrec, m)?)?;
    Ok(())
}
