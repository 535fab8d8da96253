//! Python bindings for the ambit-field toolkit.

use std::path::PathBuf;

use ambit_core::asymptotics::{admissible_kappa, slope_fit as fit_slope};
use ambit_core::config::ExperimentConfig;
use ambit_core::gauss;
use ambit_core::kernels::{self, WeightSpec as CoreSpec};
use ambit_core::limits;
use ambit_core::quad::QuadratureConfig;
use ambit_core::runner;
use ambit_core::simulate::{increments, simulate_lattice as core_simulate};
use ambit_core::variation;
use ambit_core::volatility::{sample_volatility, SigmaGrid, VolatilityModel};
use ambit_core::AmbitError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: AmbitError) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Weight function `g` of the ambit field.
#[pyclass(name = "WeightSpec", module = "ambit", frozen)]
struct PyWeightSpec {
    inner: CoreSpec,
}

#[pymethods]
impl PyWeightSpec {
    #[staticmethod]
    fn uniform(s1: f64, s2: f64, t1: f64, t2: f64) -> PyResult<Self> {
        let inner = CoreSpec::uniform(s1, s2, t1, t2);
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn singular(alpha: f64) -> PyResult<Self> {
        let inner = CoreSpec::singular(alpha);
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn triangle(alpha: f64) -> PyResult<Self> {
        let inner = CoreSpec::triangle(alpha);
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind_name()
    }

    fn scaled(&self, c: f64) -> Self {
        Self { inner: self.inner.scaled(c) }
    }

    fn g(&self, s: f64, t: f64) -> f64 {
        self.inner.g(s, t)
    }

    fn h(&self, n: usize, s: f64, t: f64) -> f64 {
        self.inner.h(n, s, t)
    }

    /// `(upper, upper_inclusive, empty)` of the admissible thinning exponents.
    fn admissible_kappa(&self) -> PyResult<(f64, bool, bool)> {
        let r = admissible_kappa(&self.inner).map_err(py_err)?;
        Ok((r.upper, r.upper_inclusive, r.empty))
    }

    fn __repr__(&self) -> String {
        format!("WeightSpec({:?})", self.inner.shape)
    }
}

/// Volatility field realized on a grid over `[-1,1]^2`.
#[pyclass(name = "Volatility", module = "ambit", frozen)]
struct PyVolatility {
    inner: SigmaGrid,
}

#[pymethods]
impl PyVolatility {
    #[staticmethod]
    #[pyo3(signature = (sigma0, resolution = 64))]
    fn constant(sigma0: f64, resolution: usize) -> PyResult<Self> {
        let inner = sample_volatility(&VolatilityModel::Constant { sigma0 }, resolution, 0).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (name, resolution = 64))]
    fn deterministic(name: String, resolution: usize) -> PyResult<Self> {
        let inner = sample_volatility(&VolatilityModel::Deterministic { name }, resolution, 0).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn scaled(&self, c: f64) -> Self {
        Self { inner: self.inner.scaled(c) }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.inner.at(u, v)
    }
}

#[pyfunction]
fn abs_moment(q: f64) -> PyResult<f64> {
    gauss::abs_moment(q).map_err(py_err)
}

#[pyfunction]
fn hermite_poly(k: i64, x: f64) -> PyResult<f64> {
    gauss::hermite_poly(k, x).map_err(py_err)
}

/// Coefficients `alpha_k` of `|x|^p - m_p` in the basis `He_k / k!`.
#[pyfunction]
#[pyo3(signature = (p, max_order = 60))]
fn up_hermite_coeffs(p: f64, max_order: usize) -> PyResult<Vec<f64>> {
    Ok(gauss::up_hermite_coeffs(p, max_order).map_err(py_err)?.coefficients)
}

/// `(cov, cov / |rho|^q)` for `Cov(|X1|^p, |X2|^p)` at correlation `rho`.
#[pyfunction]
#[pyo3(signature = (rho, p, q = 2.0))]
fn power_cov_probe(rho: f64, p: f64, q: f64) -> PyResult<(f64, f64)> {
    let r = gauss::power_cov_probe(rho, p, q).map_err(py_err)?;
    Ok((r.cov, r.bound_ratio))
}

#[pyfunction]
fn compute_cn(spec: &PyWeightSpec, n: usize) -> PyResult<f64> {
    kernels::compute_cn(&spec.inner, n, &QuadratureConfig::default()).map_err(py_err)
}

/// `(exponent, intercept, r_squared)` of a log-log fit.
#[pyfunction]
fn slope_fit(ns: Vec<f64>, values: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    if ns.len() != values.len() {
        return Err(PyValueError::new_err("ns and values differ in length"));
    }
    let pts: Vec<(f64, f64)> = ns.into_iter().zip(values).collect();
    let f = fit_slope(&pts).map_err(py_err)?;
    Ok((f.exponent, f.intercept, f.r_squared))
}

#[pyfunction]
fn bias_term(sigma0: f64, p: f64, eps: f64, s: f64, t: f64) -> PyResult<f64> {
    variation::bias_term(sigma0, p, eps, s, t).map_err(py_err)
}

#[pyfunction]
fn clt_variance(sigma: &PyVolatility, p: f64, z0: (f64, f64), s: f64, t: f64) -> PyResult<f64> {
    limits::clt_variance(&sigma.inner, p, z0, s, t).map_err(py_err)
}

/// Field values `Y(i/n, j/n)` as an `(n+1) x (n+1)` nested list.
#[pyfunction]
fn simulate_lattice(spec: &PyWeightSpec, sigma: &PyVolatility, n: usize, resolution: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let f = core_simulate(&spec.inner, &sigma.inner, n, resolution, seed).map_err(py_err)?;
    Ok(f.values.chunks(n + 1).map(<[f64]>::to_vec).collect())
}

/// `V^(p)_(s,t)` of a simulated field thinned by `k`.
#[pyfunction]
fn power_variation(spec: &PyWeightSpec, sigma: &PyVolatility, n: usize, k: usize, resolution: usize, seed: u64, p: f64, s: f64, t: f64) -> PyResult<f64> {
    let f = core_simulate(&spec.inner, &sigma.inner, n, resolution, seed).map_err(py_err)?;
    let inc = increments(&f, k).map_err(py_err)?;
    variation::power_variation(&inc, p, s, t).map_err(py_err)
}

/// Run a TOML experiment config; returns the written file paths.
#[pyfunction]
#[pyo3(signature = (path, out = None, seed = None))]
fn run_config(path: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<String>> {
    let mut cfg = ExperimentConfig::load(&path).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let res = runner::run(&cfg, out.as_deref()).map_err(|e| match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    })?;
    Ok(res.files.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn ambit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeightSpec>()?;
    m.add_class::<PyVolatility>()?;
    m.add_function(wrap_pyfunction!(abs_moment, m)?)?;
    m.add_function(wrap_pyfunction!(hermite_poly, m)?)?;
    m.add_function(wrap_pyfunction!(up_hermite_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(power_cov_probe, m)?)?;
    m.add_function(wrap_pyfunction!(compute_cn, m)?)?;
    m.add_function(wrap_pyfunction!(slope_fit, m)?)?;
    m.add_function(wrap_pyfunction!(bias_term, m)?)?;
    m.add_function(wrap_pyfunction!(clt_variance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_lattice, m)?)?;
    m.add_function(wrap_pyfunction!(power_variation, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
