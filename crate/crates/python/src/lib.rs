//! Python module `psf_unmix`. Structured results come back as plain
//! dicts and lists.

use psf_unmix_core::coherence::{CoherenceCache, LipschitzOptions};
use psf_unmix_core::diagnostics::run_self_checks;
use psf_unmix_core::libs::{analyze_spectrum, build_spectrum_spec, synthesize_spectrum, synthetic_alloy_database, synthetic_alloy_plasma};
use psf_unmix_core::{coherence as coh, experiments, radius, varpro};
use psf_unmix_core::{
    build_dictionary, Error, KernelFamily, NoiseSpec, Order, ProblemSpec, SampleGrid, SolverOptions, SupportSpec,
};
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Round-trips through JSON so nested results become dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn order(o: u8) -> PyResult<Order> {
    Order::try_from(o).map_err(py_err)
}

#[pyclass(name = "KernelFamily", frozen)]
struct PyKernel(KernelFamily);

#[pymethods]
impl PyKernel {
    #[staticmethod]
    #[pyo3(signature = (u, theta_lo = 1e-6, theta_hi = 10.0))]
    fn u_laplace(u: f64, theta_lo: f64, theta_hi: f64) -> PyResult<Self> {
        let k = KernelFamily::u_laplace(u).with_domain(theta_lo, theta_hi);
        k.validate().map_err(py_err)?;
        Ok(PyKernel(k))
    }

    #[staticmethod]
    fn gaussian() -> Self {
        PyKernel(KernelFamily::gaussian())
    }

    #[staticmethod]
    fn lorentzian() -> Self {
        PyKernel(KernelFamily::lorentzian())
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    #[pyo3(signature = (theta, t, order = 0))]
    fn eval(&self, theta: f64, t: f64, order: u8) -> PyResult<f64> {
        self.0.eval(theta, t, self::order(order)?).map_err(py_err)
    }

    fn area(&self, theta: f64) -> PyResult<f64> {
        self.0.check_theta(theta).map_err(py_err)?;
        Ok(self.0.area(theta))
    }

    fn __repr__(&self) -> String {
        format!("KernelFamily({})", self.0.label())
    }
}

#[pyclass(name = "ProblemSpec", frozen)]
struct PySpec(ProblemSpec);

#[pymethods]
impl PySpec {
    /// Groups of spike locations on `n_samples` points of `[start, end]`
    /// (default `[−half_width, half_width]`).
    #[new]
    #[pyo3(signature = (kernel, groups, n_samples, half_width = 1.0, start = None, end = None, baseline = false))]
    fn new(
        kernel: &PyKernel,
        groups: Vec<Vec<f64>>,
        n_samples: usize,
        half_width: f64,
        start: Option<f64>,
        end: Option<f64>,
        baseline: bool,
    ) -> PyResult<Self> {
        let grid = SampleGrid::new(start.unwrap_or(-half_width), end.unwrap_or(half_width), n_samples).map_err(py_err)?;
        let spec = ProblemSpec::new(kernel.0, grid, SupportSpec::new(groups).map_err(py_err)?)
            .and_then(|s| s.with_baseline(baseline))
            .map_err(py_err)?;
        Ok(PySpec(spec))
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.0.n_samples()
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.0.n_groups()
    }

    #[getter]
    fn model_order(&self) -> usize {
        self.0.model_order()
    }

    #[getter]
    fn min_separation(&self) -> f64 {
        self.0.min_separation()
    }

    fn instants(&self) -> Vec<f64> {
        self.0.grid.instants()
    }

    /// Columns of `G(θ)`.
    fn dictionary(&self, theta: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let g = build_dictionary(&self.0, &theta).map_err(py_err)?;
        Ok(g.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "ProblemSpec({}, p={}, M={}, N={})",
            self.0.kernel.label(),
            self.0.n_groups(),
            self.0.model_order(),
            self.0.n_samples()
        )
    }
}

fn dvec(x: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(x)
}

#[pyfunction]
#[pyo3(signature = (spec, theta, eta, snr_db = None, seed = 0))]
fn synthesize(spec: &PySpec, theta: Vec<f64>, eta: Vec<f64>, snr_db: Option<f64>, seed: u64) -> PyResult<Vec<f64>> {
    let noise = match snr_db {
        Some(snr_db) => NoiseSpec::Gaussian { snr_db, seed },
        None => NoiseSpec::None,
    };
    Ok(psf_unmix_core::synthesize(&spec.0, &theta, &eta, noise).map_err(py_err)?.x)
}

#[pyfunction]
fn loss(spec: &PySpec, theta: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
    varpro::loss(&spec.0, &theta, &dvec(x)).map_err(py_err)
}

#[pyfunction]
fn gradient(spec: &PySpec, theta: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(varpro::gradient(&spec.0, &theta, &dvec(x)).map_err(py_err)?.iter().copied().collect())
}

#[derive(Serialize)]
struct HessianOut {
    loss: f64,
    gradient: Vec<f64>,
    hessian: Vec<Vec<f64>>,
    min_eigenvalue: f64,
    weyl_lower_bound: f64,
}

#[pyfunction]
fn hessian<'py>(py: Python<'py>, spec: &PySpec, theta: Vec<f64>, x: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let ev = varpro::hessian(&spec.0, &theta, &dvec(x)).map_err(py_err)?;
    let out = HessianOut {
        loss: ev.loss,
        gradient: ev.gradient.iter().copied().collect(),
        hessian: ev.hessian.row_iter().map(|r| r.iter().copied().collect()).collect(),
        min_eigenvalue: ev.min_eigenvalue(),
        weyl_lower_bound: ev.weyl_lower_bound(),
    };
    to_py(py, &out)
}

#[pyfunction]
#[pyo3(signature = (spec, x, theta0, max_iter = None, tol_g = None))]
fn solve<'py>(
    py: Python<'py>,
    spec: &PySpec,
    x: Vec<f64>,
    theta0: Vec<f64>,
    max_iter: Option<usize>,
    tol_g: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut opts = SolverOptions::default();
    if let Some(m) = max_iter {
        opts.max_iter = m;
    }
    if let Some(t) = tol_g {
        opts.tol_g = t;
    }
    let r = varpro::solve(&spec.0, &dvec(x), &theta0, &opts).map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (spec, theta_i, theta_j, delta, order = 0))]
fn coherence(spec: &PySpec, theta_i: f64, theta_j: f64, delta: f64, order: u8) -> PyResult<f64> {
    coh::coherence(&spec.0, theta_i, theta_j, delta, self::order(order)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (spec, theta_i, theta_j, delta, order = 0))]
fn total_coherence<'py>(
    py: Python<'py>,
    spec: &PySpec,
    theta_i: f64,
    theta_j: f64,
    delta: f64,
    order: u8,
) -> PyResult<Bound<'py, PyAny>> {
    let r = coh::total_coherence(&spec.0, theta_i, theta_j, delta, self::order(order)?).map_err(py_err)?;
    to_py(py, &r)
}

/// Theorem constants and `ε₀` with probed Lipschitz constants. Norms
/// default to the noiseless unit-signal setting.
#[pyfunction]
#[pyo3(signature = (spec, theta_star, norm_x = 1.0, norm_w = 0.0, norm_x_star = 1.0))]
fn theorem_constants<'py>(
    py: Python<'py>,
    spec: &PySpec,
    theta_star: Vec<f64>,
    norm_x: f64,
    norm_w: f64,
    norm_x_star: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cache = CoherenceCache::for_spec(&spec.0);
    let c = radius::analyze_instance(
        &cache,
        &spec.0,
        &theta_star,
        &LipschitzOptions::default(),
        (norm_x, norm_w, norm_x_star),
    )
    .map_err(py_err)?;
    to_py(py, &c)
}

/// θ-block of the Cramér-Rao bound, row by row.
#[pyfunction]
fn crb(spec: &PySpec, theta_star: Vec<f64>, eta_star: Vec<f64>, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = experiments::crb(&spec.0, &theta_star, &eta_star, sigma).map_err(py_err)?;
    Ok(m.row_iter().map(|r| r.iter().copied().collect()).collect())
}

#[pyfunction]
#[pyo3(signature = (seed = 0, gramian_instances = 100))]
fn self_checks<'py>(py: Python<'py>, seed: u64, gramian_instances: usize) -> PyResult<Bound<'py, PyAny>> {
    let checks = run_self_checks(seed, gramian_instances).map_err(py_err)?;
    to_py(py, &checks)
}

#[derive(Serialize)]
struct RoundTrip {
    temperature_k: f64,
    true_temperature_k: f64,
    relative_fit_error: f64,
    concentrations: Vec<(String, f64)>,
    true_concentrations: Vec<(String, f64)>,
}

/// Synthetic four-species alloy spectrum fitted end to end.
#[pyfunction]
#[pyo3(signature = (snr_db = 30.0, seed = 0, n_samples = 4000))]
fn libs_round_trip<'py>(py: Python<'py>, snr_db: f64, seed: u64, n_samples: usize) -> PyResult<Bound<'py, PyAny>> {
    let db = synthetic_alloy_database();
    let plasma = synthetic_alloy_plasma();
    let model = build_spectrum_spec(&db, (256.1, 266.5), n_samples, KernelFamily::lorentzian(), false).map_err(py_err)?;
    let (obs, _, _) = synthesize_spectrum(&db, &model, &plasma, NoiseSpec::Gaussian { snr_db, seed }).map_err(py_err)?;
    let theta0 = vec![20.0 * obs.grid.spacing(); model.species.len()];
    let report = analyze_spectrum(&obs, &db, &model, &theta0, &SolverOptions::default()).map_err(py_err)?;
    let out = RoundTrip {
        temperature_k: report.temperature_k,
        true_temperature_k: plasma.temperature_k,
        relative_fit_error: report.relative_fit_error,
        concentrations: report.species.iter().map(|s| (s.species.clone(), s.concentration)).collect(),
        true_concentrations: plasma.composition.into_iter().collect(),
    };
    to_py(py, &out)
}

#[pymodule]
fn psf_unmix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PySpec>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(hessian, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(coherence, m)?)?;
    m.add_function(wrap_pyfunction!(total_coherence, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_constants, m)?)?;
    m.add_function(wrap_pyfunction!(crb, m)?)?;
    m.add_function(wrap_pyfunction!(self_checks, m)?)?;
    m.add_function(wrap_pyfunction!(libs_round_trip, m)?)?;
    Ok(())
}
