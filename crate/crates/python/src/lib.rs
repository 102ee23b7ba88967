//! Python bindings. Reports cross the boundary as plain dicts and lists,
//! built from the same serde representation the CLI writes as JSON.

use std::collections::HashMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use branchdev_core::devlab::{self, BatteryConfig, EpsSet, FitPoint, SpectralSummary};
use branchdev_core::model::{validate, Count2};
use branchdev_core::simulate::{self as sim, EventParams, Threshold};
use branchdev_core::spectral::{default_grid, mean_ratio_sup};
use branchdev_core::{fixtures, pgf, Error, ModelSpec, SpectralData, Statistic};

/// Atoms of a truncated law keyed by `(j1, j2)`, and the mass outside the box.
type BoxedLaw = (HashMap<(usize, usize), f64>, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Parse(_) | Error::InvalidLaw { .. } | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Zero-based index of a 1-based type label.
fn type_index(start_type: usize) -> PyResult<usize> {
    match start_type {
        1 | 2 => Ok(start_type - 1),
        _ => Err(PyValueError::new_err(format!("start_type is 1 or 2, got {start_type}"))),
    }
}

fn start(start_type: usize) -> PyResult<Count2> {
    let mut x = [0; 2];
    x[type_index(start_type)?] = 1;
    Ok(x)
}

fn statistic(name: &str) -> PyResult<Statistic> {
    name.parse().map_err(py_err)
}

/// A two-type branching process with immigration: two offspring laws and an
/// immigration law, each finitely supported on pairs of counts.
#[pyclass(name = "Model", module = "branchdev", frozen)]
pub struct Model {
    spec: ModelSpec,
}

impl Model {
    fn spectral_data(&self) -> PyResult<SpectralData> {
        SpectralData::compute(&self.spec).map_err(py_err)
    }
}

#[pymethods]
impl Model {
    /// Parses the TOML model format used by the command-line tool.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Model {
            spec: ModelSpec::from_toml_str(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Model {
            spec: ModelSpec::from_path(path).map_err(py_err)?,
        })
    }

    /// `"a"` (geometric regime) or `"b"` (supergeometric regime).
    #[staticmethod]
    fn fixture(name: &str) -> PyResult<Self> {
        let spec = match name {
            "a" | "A" => fixtures::fixture_a(),
            "b" | "B" => fixtures::fixture_b(),
            _ => return Err(PyValueError::new_err(format!("unknown fixture `{name}`"))),
        };
        Ok(Model { spec })
    }

    /// The model as a dict with `offspring.type1`, `offspring.type2` and `immigration`.
    fn laws<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.spec)
    }

    #[getter]
    fn mean_matrix(&self) -> [[f64; 2]; 2] {
        self.spec.mean_matrix()
    }

    #[getter]
    fn jacobian_at_zero(&self) -> [[f64; 2]; 2] {
        self.spec.jacobian_at_zero()
    }

    #[getter]
    fn immigration_mean(&self) -> [f64; 2] {
        self.spec.immigration_mean()
    }

    #[getter]
    fn h0(&self) -> f64 {
        self.spec.h0()
    }

    #[pyo3(signature = (geometric_d = 1))]
    fn validate<'py>(&self, py: Python<'py>, geometric_d: u32) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &validate(&self.spec, geometric_d))
    }

    fn spectral<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let sd = self.spectral_data()?;
        to_py(py, &SpectralSummary::new(&self.spec, &sd))
    }

    #[pyo3(signature = (n, grid_max = 20))]
    fn mean_ratio_sup(&self, n: usize, grid_max: u32) -> PyResult<f64> {
        let sd = self.spectral_data()?;
        mean_ratio_sup(&self.spec, &sd.perron, n, &default_grid(grid_max)).map_err(py_err)
    }

    /// Exact law of `X_n` inside the box `[0, degree]^2` and the mass outside it.
    #[pyo3(signature = (n, start_type = 1, degree = 24))]
    fn exact_law(&self, n: usize, start_type: usize, degree: usize) -> PyResult<BoxedLaw> {
        let i = type_index(start_type)?;
        let generation = pgf::iterate_process(&self.spec, n, degree);
        let g = &generation.g[i];
        let law = g.entries().filter(|(_, p)| *p != 0.0).map(|(j, p)| ((j[0], j[1]), p)).collect();
        Ok((law, g.residual()))
    }

    /// Exact deviation probabilities as `(value, residual)`: the truth lies in `[value, value + residual]`.
    #[pyo3(signature = (statistic, ns, eps, l = [1.0, -1.0], start_type = 1, degree = 24))]
    fn exact_deviation(
        &self,
        statistic: &str,
        ns: Vec<usize>,
        eps: f64,
        l: [f64; 2],
        start_type: usize,
        degree: usize,
    ) -> PyResult<Vec<(f64, f64)>> {
        let sd = self.spectral_data()?;
        let i = type_index(start_type)?;
        let curve = pgf::exact_deviation_curve(&self.spec, &sd, i, &ns, crate::statistic(statistic)?, eps, l, degree)
            .map_err(py_err)?;
        Ok(curve.into_iter().map(|p| (p.value, p.residual)).collect())
    }

    /// `h0 * gamma`, the geometric decay base, when it exists.
    fn geometric_base(&self) -> PyResult<f64> {
        let sd = self.spectral_data()?;
        pgf::geometric_base(&self.spec, &sd).map_err(py_err)
    }

    #[pyo3(signature = (n, seed, start_type = 1))]
    fn simulate_path(&self, n: usize, seed: u64, start_type: usize) -> PyResult<Vec<(u64, u64)>> {
        let t = sim::simulate_path(&self.spec, n, start(start_type)?, seed, false).map_err(py_err)?;
        Ok(t.x.into_iter().map(|x| (x[0], x[1])).collect())
    }

    /// The martingale `Y_n` along a path of states.
    fn y_sequence(&self, path: Vec<(u64, u64)>) -> PyResult<Vec<f64>> {
        let sd = self.spectral_data()?;
        let x: Vec<Count2> = path.into_iter().map(|(a, b)| [a, b]).collect();
        Ok(sim::y_sequence(&self.spec, &sd.perron, &x))
    }

    /// Monte Carlo estimates of one deviation statistic at each `n` in `ns`.
    #[pyo3(signature = (statistic, ns, eps, reps, seed, l = [1.0, -1.0], start_type = 1, alpha_quantile = 0.7, reference_lag = 15))]
    #[allow(clippy::too_many_arguments)]
    fn estimate<'py>(
        &self,
        py: Python<'py>,
        statistic: &str,
        ns: Vec<usize>,
        eps: f64,
        reps: u64,
        seed: u64,
        l: [f64; 2],
        start_type: usize,
        alpha_quantile: f64,
        reference_lag: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let sd = self.spectral_data()?;
        let params = EventParams {
            eps,
            l,
            start: start(start_type)?,
            reference_lag,
            alpha: Threshold::Quantile(alpha_quantile),
        };
        let stat = crate::statistic(statistic)?;
        let curve = py
            .detach(|| sim::estimate_event_curve(&self.spec, &sd, stat, &ns, &params, reps, seed))
            .map_err(py_err)?;
        to_py(py, &curve)
    }

    /// Runs the full verdict battery and returns the report as a dict.
    #[pyo3(signature = (seed, reps = 100_000, mgf_reps = 100_000, eps_next = 0.5, eps_ratio = 0.25, eps_tail = 0.01, l = [1.0, -1.0], n_max = 7))]
    #[allow(clippy::too_many_arguments)]
    fn verdicts<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        reps: u64,
        mgf_reps: u64,
        eps_next: f64,
        eps_ratio: f64,
        eps_tail: f64,
        l: [f64; 2],
        n_max: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let sd = self.spectral_data()?;
        let defaults = BatteryConfig::default();
        let window = |from: usize| (from..=n_max.max(from)).collect::<Vec<_>>();
        let config = BatteryConfig {
            seed,
            reps,
            mgf_reps,
            eps: EpsSet {
                next: eps_next,
                ratio: eps_ratio,
                tail: eps_tail,
            },
            l,
            geometric_ns: window(defaults.geometric_ns[0]),
            supergeometric_ns: window(defaults.supergeometric_ns[0]),
            tail_ns: window(defaults.tail_ns[0]),
            ..defaults
        };
        let report = py.detach(|| devlab::verdicts(&self.spec, &sd, &config)).map_err(py_err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        let count = |law: &branchdev_core::Pmf2| law.atoms().len();
        format!(
            "Model(offspring atoms = ({}, {}), immigration atoms = {})",
            count(&self.spec.offspring[0]),
            count(&self.spec.offspring[1]),
            count(&self.spec.immigration)
        )
    }
}

fn fit_points(ns: Vec<usize>, ps: Vec<f64>, ses: Option<Vec<f64>>) -> PyResult<Vec<FitPoint>> {
    if ns.len() != ps.len() || ses.as_ref().is_some_and(|s| s.len() != ns.len()) {
        return Err(PyValueError::new_err("ns, ps and ses must have equal length"));
    }
    let ses = ses.unwrap_or_else(|| vec![0.0; ns.len()]);
    Ok(ns
        .into_iter()
        .zip(ps)
        .zip(ses)
        .map(|((n, p), se)| FitPoint { n, p, se })
        .collect())
}

/// Fits `p_n ~ C base^n`; standard errors of zero mark exact values.
#[pyfunction]
#[pyo3(signature = (ns, ps, ses = None))]
fn fit_geometric<'py>(py: Python<'py>, ns: Vec<usize>, ps: Vec<f64>, ses: Option<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &devlab::fit_geometric(&fit_points(ns, ps, ses)?).map_err(py_err)?)
}

/// Fits `p_n ~ C mu^(base^n)`.
#[pyfunction]
#[pyo3(signature = (ns, ps, ses = None))]
fn fit_supergeometric<'py>(
    py: Python<'py>,
    ns: Vec<usize>,
    ps: Vec<f64>,
    ses: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &devlab::fit_supergeometric(&fit_points(ns, ps, ses)?).map_err(py_err)?)
}

#[pymodule]
pub fn branchdev(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(fit_geometric, m)?)?;
    m.add_function(wrap_pyfunction!(fit_supergeometric, m)?)?;
    Ok(())
}
