//! Python bindings: problem loading, the G-expectation lattice, the BSVIE
//! solver, path simulation with `K` reconstruction, and the comparison check.
//!
//! Arrays cross the boundary as nested lists of floats; reports cross as
//! plain dicts.

use std::sync::Arc;

use gbsvie_core::paths::reconstruct_k_anchors;
use gbsvie_core::{
    self as core, CompareOptions, Error, Expression, PathConfig, ProblemFile, ProblemSpec, SolutionBundle, VolControl,
    VolatilityBand,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(
    gbsvie,
    AuditRefused,
    PyException,
    "The comparison hypotheses could not be confirmed."
);

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::AuditFailed(msg) => AuditRefused::new_err(msg),
        Error::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        Error::Parse(_)
        | Error::InvalidBand { .. }
        | Error::InvalidGrid(_)
        | Error::InvalidParameter { .. }
        | Error::CflViolated { .. }
        | Error::Schema(_)
        | Error::Incompatible(_)
        | Error::ControlOutOfBand { .. }
        | Error::EmptyControls
        | Error::GeneratorDependsOnY => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2`.
#[pyfunction]
fn g_function(a: f64, sigma_lo: f64, sigma_hi: f64) -> PyResult<f64> {
    let band = VolatilityBand::new(sigma_lo, sigma_hi).map_err(to_py_err)?;
    Ok(core::g_function(a, &band))
}

/// A validated problem built from the JSON problem-file format.
#[pyclass(frozen)]
struct Problem {
    spec: Arc<ProblemSpec>,
    report: core::ValidationReport,
}

#[pymethods]
impl Problem {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        let (spec, report) = core::parse_problem(text).map_err(to_py_err)?;
        Ok(Problem {
            spec: Arc::new(spec),
            report,
        })
    }

    #[getter]
    fn n_t(&self) -> usize {
        self.spec.n_t()
    }

    #[getter]
    fn n_x(&self) -> usize {
        self.spec.n_x()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.spec.tgrid.times()
    }

    #[getter]
    fn nodes(&self) -> Vec<f64> {
        self.spec.xgrid.nodes()
    }

    /// Assumption probes run when the problem was loaded.
    fn validation<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.report)
    }

    /// The problem file with every default written out.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&ProblemFile::from_spec(&self.spec))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// `E^[payoff(x + B_T)]` at `x = 0` on this problem's band and grids.
    fn g_expectation(&self, py: Python<'_>, payoff: &str) -> PyResult<f64> {
        let expr = Expression::parse(payoff).map_err(|e| to_py_err(e.into()))?;
        let spec = Arc::clone(&self.spec);
        py.detach(move || core::g_expectation(&expr, &spec.band, &spec.tgrid, &spec.xgrid, spec.substeps))
            .map_err(to_py_err)
    }

    /// Solves the equation on the whole grid.
    fn solve(&self, py: Python<'_>) -> PyResult<Solution> {
        let spec = Arc::clone(&self.spec);
        let bundle = py.detach(move || core::solve_bsvie(&spec)).map_err(to_py_err)?;
        Ok(Solution {
            spec: Arc::clone(&self.spec),
            bundle: Arc::new(bundle),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(band=[{}, {}], T={}, n_t={}, n_x={})",
            self.spec.band.sigma_lo(),
            self.spec.band.sigma_hi(),
            self.spec.tgrid.horizon(),
            self.spec.n_t(),
            self.spec.n_x()
        )
    }
}

/// Solution of one problem: `Y` on the grid, `Z` and the optimizer field on
/// the triangle `s >= t`, and the interval plan of the Picard iteration.
#[pyclass(frozen)]
struct Solution {
    spec: Arc<ProblemSpec>,
    bundle: Arc<SolutionBundle>,
}

impl Solution {
    fn check_anchor(&self, i: usize) -> PyResult<()> {
        if i > self.spec.n_t() {
            return Err(PyIndexError::new_err(format!(
                "anchor {i} out of range (max {})",
                self.spec.n_t()
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Solution {
    /// `Y(t_i, x_j)` as a list of rows.
    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        self.bundle.y.to_rows()
    }

    /// `Y(t_i, x)` with linear interpolation in `x`.
    fn y_at(&self, i: usize, x: f64) -> PyResult<f64> {
        self.check_anchor(i)?;
        Ok(self.bundle.y_at(i, x, &self.spec.xgrid))
    }

    /// `Z(t_i, s_k, x_j)` for `k = i..=n_t`, one row per `k`.
    fn z(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        self.check_anchor(i)?;
        Ok((i..=self.spec.n_t())
            .map(|k| self.bundle.z.row(i, k).expect("k >= i").to_vec())
            .collect())
    }

    /// Volatility attaining the supremum in `G` at `(t_i, s_k, x_j)`, one row per `k >= i`.
    fn sig_star(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        self.check_anchor(i)?;
        let band = self.spec.band;
        Ok((i..=self.spec.n_t())
            .map(|k| {
                self.bundle
                    .sig_star
                    .row(i, k)
                    .expect("k >= i")
                    .iter()
                    .map(|r| r.sigma(&band))
                    .collect()
            })
            .collect())
    }

    #[getter]
    fn plan<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.bundle.plan)
    }

    #[getter]
    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.bundle.diagnostics)
    }

    /// Pathwise `K(t_i, T)` on `n_paths` simulated paths.
    ///
    /// `control` is either a constant volatility inside the band or
    /// `None` for the feedback control read from the optimizer field of anchor 0.
    #[pyo3(signature = (n_paths, seed, anchor=0, control=None, substeps=4, x0=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn k_samples(
        &self,
        py: Python<'_>,
        n_paths: usize,
        seed: u64,
        anchor: usize,
        control: Option<f64>,
        substeps: usize,
        x0: f64,
    ) -> PyResult<Vec<f64>> {
        self.check_anchor(anchor)?;
        let control = match control {
            Some(sigma) => VolControl::Constant(sigma),
            None => VolControl::feedback(&self.bundle, &self.spec, 0).map_err(to_py_err)?,
        };
        let mut cfg = PathConfig::new(n_paths, seed).with_substeps(substeps);
        cfg.x0 = x0;
        let (spec, bundle) = (Arc::clone(&self.spec), Arc::clone(&self.bundle));
        let samples = py
            .detach(move || {
                let batch = core::simulate_paths(&control, &spec, &cfg)?;
                reconstruct_k_anchors(&bundle, &spec, &batch, &[anchor])
            })
            .map_err(to_py_err)?;
        Ok(samples[0].iter().map(|k| k.value).collect())
    }
}

/// Solves both problems and reports `min (Y1 - Y2)` over the grid.
///
/// Raises `AuditRefused` when problem 1 cannot be confirmed to dominate
/// problem 2 in its data.
#[pyfunction]
#[pyo3(signature = (first, second, chained=false, cmp_tol=core::verify::DEFAULT_CMP_TOL))]
fn compare<'py>(
    py: Python<'py>,
    first: &Problem,
    second: &Problem,
    chained: bool,
    cmp_tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let (s1, s2) = (Arc::clone(&first.spec), Arc::clone(&second.spec));
    let opts = CompareOptions { cmp_tol, chained };
    let cmp = py
        .detach(move || core::compare_solutions(&s1, &s2, &opts))
        .map_err(to_py_err)?;
    to_dict(py, &cmp.report)
}

#[pymodule]
fn gbsvie(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", core::VERSION)?;
    m.add("AuditRefused", m.py().get_type::<AuditRefused>())?;
    m.add_class::<Problem>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(g_function, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
