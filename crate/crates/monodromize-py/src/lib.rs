//! Python module `monodromize_py`: σ, the step map, continued fractions and
//! the Harper monodromy/renormalization drivers.

use num_complex::Complex64 as C64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use monodromize::harper::{pair_monodromy, renorm_iterate, step_map as rust_step_map, HarperPoint, RenormConfig, RATIONAL_TOL};
use monodromize::sigma::SigmaEngine;
use monodromize::trigpoly::{cf_expand as rust_cf_expand, CF_RATIONAL_TOL};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// σ(z) for step h.
#[pyfunction]
fn sigma(h: f64, z: C64) -> PyResult<C64> {
    SigmaEngine::new(h).and_then(|s| s.value(z)).map_err(err)
}

/// h' = 2π·frac(2π/h), or None at a rational termination.
#[pyfunction]
fn step_map(h: f64) -> Option<f64> {
    rust_step_map(h, RATIONAL_TOL)
}

/// Partial quotients of 2π/h.
#[pyfunction]
#[pyo3(signature = (h, max_depth = 32))]
fn cf_expand(h: f64, max_depth: usize) -> PyResult<Vec<u64>> {
    rust_cf_expand(h, max_depth, CF_RATIONAL_TOL).map(|e| e.p).map_err(err)
}

/// Monodromy of the symmetric Harper pair read as a point (s, t, a) of ℍ(λ₁).
#[pyfunction]
fn harper_monodromy<'py>(py: Python<'py>, lam: f64, e: C64, h: f64) -> PyResult<Bound<'py, PyDict>> {
    let point = HarperPoint::harper(lam, e, h);
    let r = py.allow_threads(|| pair_monodromy(&point, &RenormConfig::default())).map_err(err)?;
    let p = &r.projection;
    let d = PyDict::new_bound(py);
    d.set_item("lambda1", p.lambda1)?;
    d.set_item("s", p.s)?;
    d.set_item("t", p.t)?;
    d.set_item("a", p.a)?;
    d.set_item("shape_residual", p.shape.max())?;
    d.set_item("closed_form_deviation", p.formula_deviation)?;
    d.set_item("det_residual", r.monodromy.det_residual)?;
    Ok(d)
}

/// Renormalization trajectory from a Harper point, as CSV text.
#[pyfunction]
fn harper_renorm(py: Python<'_>, lam: f64, e: C64, h: f64, steps: usize) -> PyResult<String> {
    let point = HarperPoint::harper(lam, e, h);
    let traj = py.allow_threads(|| renorm_iterate(&point, steps, &RenormConfig::default()));
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(err)
}

#[pymodule]
fn monodromize_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sigma, m)?)?;
    m.add_function(wrap_pyfunction!(step_map, m)?)?;
    m.add_function(wrap_pyfunction!(cf_expand, m)?)?;
    m.add_function(wrap_pyfunction!(harper_monodromy, m)?)?;
    m.add_function(wrap_pyfunction!(harper_renorm, m)?)?;
    Ok(())
}
