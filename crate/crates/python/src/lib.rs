//! Python bindings: marginals, the particle flow, the best-response
//! evaluator, the exact oracles and the experiment runners.

use std::sync::Arc;

use minmax_ot::experiment::{self, ExperimentSpec, Scenario};
use minmax_ot::flow::{self, Method, ParticleSystem, Trajectory, TrajectoryRecord};
use minmax_ot::model::{self, cost_by_name, Density, FlowConfig, Marginal, PointCloud};
use minmax_ot::oracle;
use minmax_ot::response::{self, ResponseEvaluator};
use minmax_ot::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for minmax_ot::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn points(rows: Vec<Vec<f64>>) -> PyResult<PointCloud> {
    let dim = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| py_err(Error::EmptyPoints))?;
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(py_err(Error::DimensionMismatch {
            expected: dim,
            got: r.len(),
        }));
    }
    PointCloud::new(dim, rows.concat()).or_raise()
}

fn rows(p: &PointCloud) -> Vec<Vec<f64>> {
    p.iter().map(<[f64]>::to_vec).collect()
}

/// A source or target distribution.
#[pyclass(name = "Marginal", frozen, skip_from_py_object)]
struct PyMarginal {
    inner: Marginal,
}

#[pymethods]
impl PyMarginal {
    /// Gaussian with a row-major `d × d` covariance.
    #[staticmethod]
    fn gaussian(mean: Vec<f64>, covariance: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: model::make_gaussian(&mean, &covariance).or_raise()?,
        })
    }

    #[staticmethod]
    fn isotropic_gaussian(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        Ok(Self {
            inner: model::make_isotropic_gaussian(&mean, variance).or_raise()?,
        })
    }

    #[staticmethod]
    fn ring_peak(
        ring_radius: f64,
        ring_width: f64,
        peak_weight: f64,
        peak_std: f64,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: model::make_ring_peak(ring_radius, ring_width, peak_weight, peak_std)
                .or_raise()?,
        })
    }

    /// Mixture from `(weight, marginal)` pairs; weights must sum to one.
    #[staticmethod]
    fn mixture(components: Vec<(f64, PyRef<'_, PyMarginal>)>) -> PyResult<Self> {
        let parts = components
            .iter()
            .map(|(w, m)| (*w, m.inner.clone()))
            .collect();
        Ok(Self {
            inner: model::make_mixture(parts).or_raise()?,
        })
    }

    /// Empirical marginal from a list of points.
    #[staticmethod]
    fn empirical(samples: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: model::make_empirical(points(samples)?).or_raise()?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn is_analytic(&self) -> bool {
        self.inner.as_analytic().is_some()
    }

    /// Density at `x`; analytic marginals only.
    fn density(&self, x: Vec<f64>) -> PyResult<f64> {
        let a = self
            .inner
            .as_analytic()
            .ok_or_else(|| PyValueError::new_err("empirical marginals have no density"))?;
        if x.len() != a.dim() {
            return Err(py_err(Error::DimensionMismatch {
                expected: a.dim(),
                got: x.len(),
            }));
        }
        Ok(a.density_at(&x))
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        rows(&self.inner.sample_n(n, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn __repr__(&self) -> String {
        let kind = if self.is_analytic() {
            "analytic"
        } else {
            "empirical"
        };
        format!("Marginal({kind}, dim={})", self.inner.dim())
    }
}

/// Hyperparameters of the particle flow. Keyword arguments override the
/// defaults.
#[pyclass(name = "FlowConfig", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyFlowConfig {
    n_pairs: usize,
    dt: f64,
    beta: f64,
    steps: usize,
    noise_std_coeff: f64,
    lambda0: f64,
    eta_var: f64,
    bins_per_dim: usize,
    seed: u64,
    freeze_lambda: bool,
    box_refresh: usize,
    box_padding: f64,
}

impl From<&FlowConfig> for PyFlowConfig {
    fn from(c: &FlowConfig) -> Self {
        Self {
            n_pairs: c.n_pairs,
            dt: c.dt,
            beta: c.beta,
            steps: c.steps,
            noise_std_coeff: c.noise_std_coeff,
            lambda0: c.lambda0,
            eta_var: c.eta_var,
            bins_per_dim: c.bins_per_dim,
            seed: c.seed,
            freeze_lambda: c.freeze_lambda,
            box_refresh: c.box_refresh,
            box_padding: c.box_padding,
        }
    }
}

impl PyFlowConfig {
    fn to_config(&self, method: Method) -> FlowConfig {
        let (kl_variant_x, kl_variant_y) = flow::method_preset(method);
        FlowConfig {
            n_pairs: self.n_pairs,
            dt: self.dt,
            beta: self.beta,
            steps: self.steps,
            noise_std_coeff: self.noise_std_coeff,
            lambda0: self.lambda0,
            eta_var: self.eta_var,
            kl_variant_x,
            kl_variant_y,
            bins_per_dim: self.bins_per_dim,
            seed: self.seed,
            freeze_lambda: self.freeze_lambda,
            box_refresh: self.box_refresh,
            box_padding: self.box_padding,
        }
    }
}

#[pymethods]
impl PyFlowConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<Self>> {
        let py_self = Python::attach(|py| Py::new(py, Self::from(&FlowConfig::default())))?;
        if let Some(kw) = kwargs {
            let obj = py_self.bind(kw.py());
            for (k, v) in kw.iter() {
                let name: String = k.extract()?;
                if !obj.hasattr(name.as_str())? {
                    return Err(PyValueError::new_err(format!(
                        "unknown FlowConfig field `{name}`"
                    )));
                }
                obj.setattr(name.as_str(), v)?;
            }
        }
        Ok(py_self)
    }

    fn validate(&self) -> PyResult<()> {
        self.to_config(Method::I).validate().or_raise()
    }

    fn __repr__(&self) -> String {
        format!(
            "FlowConfig(n_pairs={}, dt={}, beta={}, steps={}, lambda0={}, bins_per_dim={}, seed={})",
            self.n_pairs, self.dt, self.beta, self.steps, self.lambda0, self.bins_per_dim, self.seed
        )
    }
}

fn record_dict<'py>(py: Python<'py>, r: &TrajectoryRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("t", r.t)?;
    d.set_item("lambda", r.lambda)?;
    d.set_item("kl1", r.kl1)?;
    d.set_item("kl2", r.kl2)?;
    d.set_item("reverse_kl1", r.reverse_kl1)?;
    d.set_item("reverse_kl2", r.reverse_kl2)?;
    d.set_item("cost", r.cost)?;
    d.set_item("l2_mu", r.l2_mu)?;
    d.set_item("l2_nu", r.l2_nu)?;
    Ok(d)
}

/// Trajectory and final particles of one flow run.
#[pyclass(name = "RunResult", frozen, skip_from_py_object)]
struct PyRunResult {
    trajectory: Trajectory,
    system: ParticleSystem,
    #[pyo3(get)]
    error: Option<String>,
}

#[pymethods]
impl PyRunResult {
    fn __len__(&self) -> usize {
        self.trajectory.len()
    }

    /// Column name to list of values, one entry per recorded step.
    #[getter]
    fn trajectory<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        let rs = &self.trajectory.records;
        let col = |f: fn(&TrajectoryRecord) -> f64| rs.iter().map(f).collect::<Vec<f64>>();
        d.set_item("step", rs.iter().map(|r| r.step).collect::<Vec<_>>())?;
        d.set_item("t", col(|r| r.t))?;
        d.set_item("lambda", col(|r| r.lambda))?;
        d.set_item("kl1", col(|r| r.kl1))?;
        d.set_item("kl2", col(|r| r.kl2))?;
        d.set_item("reverse_kl1", col(|r| r.reverse_kl1))?;
        d.set_item("reverse_kl2", col(|r| r.reverse_kl2))?;
        d.set_item("cost", col(|r| r.cost))?;
        d.set_item("l2_mu", col(|r| r.l2_mu))?;
        d.set_item("l2_nu", col(|r| r.l2_nu))?;
        Ok(d)
    }

    #[getter]
    fn final_record<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        record_dict(py, self.trajectory.last().expect("initial record"))
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.system.lambda
    }

    /// Final particle families `x1`, `y1`, `x2`, `y2` as point lists.
    fn particles<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("x1", rows(&self.system.x1))?;
        d.set_item("y1", rows(&self.system.y1))?;
        d.set_item("x2", rows(&self.system.x2))?;
        d.set_item("y2", rows(&self.system.y2))?;
        Ok(d)
    }

    fn interpolant(&self, s: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&flow::interpolant(&self.system, s).or_raise()?))
    }

    fn growth_bound_violations(&self, c_star: f64) -> Vec<usize> {
        self.trajectory.growth_bound_violations(c_star)
    }

    fn lambda_non_decreasing(&self) -> bool {
        self.trajectory.lambda_non_decreasing()
    }
}

fn parse_method(method: &str) -> PyResult<Method> {
    method.parse().map_err(py_err)
}

/// Runs the particle flow. A run that hits a non-finite update stops early;
/// the partial trajectory is kept and `error` describes the failure.
#[pyfunction]
#[pyo3(signature = (mu, nu, config = None, method = "I", cost = "quadratic"))]
fn run(
    py: Python<'_>,
    mu: &PyMarginal,
    nu: &PyMarginal,
    config: Option<PyFlowConfig>,
    method: &str,
    cost: &str,
) -> PyResult<PyRunResult> {
    let cfg = config
        .unwrap_or_else(|| PyFlowConfig::from(&FlowConfig::default()))
        .to_config(parse_method(method)?);
    let cost = cost_by_name(cost).or_raise()?;
    let out = py
        .detach(|| flow::run(&mu.inner, &nu.inner, cost.as_ref(), &cfg, &[]))
        .or_raise()?;
    Ok(PyRunResult {
        trajectory: out.trajectory,
        system: out.system,
        error: out.abort.map(|e| e.to_string()),
    })
}

/// Semi-analytic best response to a fixed regularization weight.
#[pyclass(name = "ResponseEvaluator", frozen, skip_from_py_object)]
struct PyResponseEvaluator {
    inner: Arc<ResponseEvaluator>,
}

#[pymethods]
impl PyResponseEvaluator {
    #[new]
    #[pyo3(signature = (mu, nu, cost = "quadratic", nodes_per_dim = response::DEFAULT_NODES_PER_DIM))]
    fn new(mu: &PyMarginal, nu: &PyMarginal, cost: &str, nodes_per_dim: usize) -> PyResult<Self> {
        let cost: Arc<dyn model::Cost> = Arc::from(cost_by_name(cost).or_raise()?);
        Ok(Self {
            inner: Arc::new(
                ResponseEvaluator::new(&mu.inner, &nu.inner, cost, nodes_per_dim).or_raise()?,
            ),
        })
    }

    fn partition_z(&self, lam: f64) -> PyResult<f64> {
        self.inner.partition_z(lam).or_raise()
    }

    fn z1(&self, lam: f64, x: Vec<f64>) -> PyResult<f64> {
        self.inner.z1_at(lam, &x).or_raise()
    }

    fn z2(&self, lam: f64, y: Vec<f64>) -> PyResult<f64> {
        self.inner.z2_at(lam, &y).or_raise()
    }

    fn b1(&self, lam: f64, x: Vec<f64>) -> PyResult<f64> {
        self.inner.best_response_marginal_1(lam, &x).or_raise()
    }

    fn b2(&self, lam: f64, y: Vec<f64>) -> PyResult<f64> {
        self.inner.best_response_marginal_2(lam, &y).or_raise()
    }

    fn v(&self, lam: f64) -> PyResult<f64> {
        self.inner.v_of_lambda(lam).or_raise()
    }

    fn dv_dlambda(&self, lam: f64) -> PyResult<f64> {
        self.inner.dv_dlambda(lam).or_raise()
    }

    fn e_d(&self, lam: f64) -> PyResult<f64> {
        self.inner.e_d(lam).or_raise()
    }

    fn lower_bound_holds(&self, lam: f64, c_star: f64) -> PyResult<bool> {
        self.inner.z_lower_bound_holds(lam, c_star).or_raise()
    }

    /// `(t, Λ, V)` along the RK4 solution of `Λ̇ = V(Λ)`.
    fn solve_ode(
        &self,
        py: Python<'_>,
        lambda0: f64,
        t_end: f64,
        dt: f64,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let ev = Arc::clone(&self.inner);
        let trace = py
            .detach(move || response::solve_lambda_ode(&ev, lambda0, t_end, dt))
            .or_raise()?;
        Ok(trace.iter().map(|p| (p.t, p.lambda, p.v)).collect())
    }
}

#[pyfunction]
fn lambda_growth_bound(c_star: f64, lambda0: f64, t: f64) -> f64 {
    response::lambda_growth_bound(c_star, lambda0, t)
}

/// Squared 2-Wasserstein distance between two Gaussians (row-major
/// covariances).
#[pyfunction]
fn gaussian_w2_squared(m1: Vec<f64>, s1: Vec<f64>, m2: Vec<f64>, s2: Vec<f64>) -> PyResult<f64> {
    oracle::gaussian_w2_squared(&m1, &s1, &m2, &s2).or_raise()
}

#[pyfunction]
fn gaussian_kl(m1: Vec<f64>, s1: Vec<f64>, m2: Vec<f64>, s2: Vec<f64>) -> PyResult<f64> {
    oracle::gaussian_kl(&m1, &s1, &m2, &s2).or_raise()
}

/// Exact OT between equal-size uniform point sets: `(cost, assignment)`.
#[pyfunction]
#[pyo3(signature = (xs, ys, cost = "quadratic"))]
fn discrete_ot(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, cost: &str) -> PyResult<(f64, Vec<usize>)> {
    let cost = cost_by_name(cost).or_raise()?;
    let plan = oracle::discrete_ot(&points(xs)?, &points(ys)?, cost.as_ref()).or_raise()?;
    Ok((plan.cost, plan.assignment))
}

/// `(μ, ν)` of a built-in scenario: `gaussian_pair` or `ring_to_mixture`.
#[pyfunction]
fn scenario(name: &str) -> PyResult<(PyMarginal, PyMarginal)> {
    let s = match name {
        "gaussian_pair" => Scenario::GaussianPair,
        "ring_to_mixture" => Scenario::RingToMixture,
        other => return Err(PyValueError::new_err(format!("unknown scenario `{other}`"))),
    };
    let (mu, nu) = s.marginals().or_raise()?;
    Ok((PyMarginal { inner: mu }, PyMarginal { inner: nu }))
}

fn spec_from(config: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_config_str(config).or_raise()?;
    if let Some(kw) = overrides {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<PyBool>() {
                v.extract::<bool>()?.to_string()
            } else {
                v.str()?.to_string()
            };
            spec.set(&key, &value).or_raise()?;
        }
    }
    Ok(spec)
}

/// The resolved config text for `config` plus keyword overrides.
#[pyfunction]
#[pyo3(signature = (config = "", **overrides))]
fn resolve_config(config: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    Ok(spec_from(config, overrides)?.to_config_string())
}

/// Runs a configured experiment and writes its artifacts; returns the final
/// trajectory record.
#[pyfunction]
#[pyo3(signature = (config = "", **overrides))]
fn cmd_run<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec_from(config, overrides)?;
    let report = py.detach(|| experiment::cmd_run(&spec)).or_raise()?;
    let d = record_dict(py, report.trajectory.last().expect("initial record"))?;
    d.set_item("wall_seconds", report.wall_seconds)?;
    Ok(d)
}

/// Runs methods I, II and III and writes `methods.csv`; returns its rows.
#[pyfunction]
#[pyo3(signature = (config = "", **overrides))]
fn cmd_compare_methods<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let spec = spec_from(config, overrides)?;
    let rows = py
        .detach(|| experiment::cmd_compare_methods(&spec))
        .or_raise()?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.as_str())?;
            d.set_item("l2_error", r.l2_error)?;
            d.set_item("kl", r.kl)?;
            d.set_item("reverse_kl", r.reverse_kl)?;
            d.set_item("total_kl", r.total_kl())?;
            Ok(d)
        })
        .collect()
}

/// Runs the best-response validation and writes its report files.
#[pyfunction]
#[pyo3(signature = (config = "", **overrides))]
fn cmd_validate_response<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec_from(config, overrides)?;
    let v = py
        .detach(|| experiment::cmd_validate_response(&spec))
        .or_raise()?;
    let out = PyDict::new(py);
    out.set_item("c_star", v.c_star)?;
    out.set_item("bound_violations", v.bound_violations())?;
    let rows = v
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("lambda", r.lambda)?;
            d.set_item("Z", r.z)?;
            d.set_item("V", r.v)?;
            d.set_item("dV_dlambda", r.dv_dlambda)?;
            d.set_item("dV_dlambda_fd", r.dv_dlambda_fd)?;
            d.set_item("E_d", r.e_d)?;
            d.set_item("dE_d_dlambda_fd", r.de_d_fd)?;
            d.set_item("danskin_residual", r.danskin_residual())?;
            d.set_item("z_lower_bound", r.z_lower_bound)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("rows", rows)?;
    out.set_item(
        "ode",
        v.ode
            .iter()
            .map(|p| (p.t, p.lambda, p.v))
            .collect::<Vec<_>>(),
    )?;
    Ok(out)
}

#[pymodule]
fn minmaxot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMarginal>()?;
    m.add_class::<PyFlowConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyResponseEvaluator>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_growth_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_w2_squared, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_ot, m)?)?;
    m.add_function(wrap_pyfunction!(scenario, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_run, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_compare_methods, m)?)?;
    m.add_function(wrap_pyfunction!(cmd_validate_response, m)?)?;
    Ok(())
}
