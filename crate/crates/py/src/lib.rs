// SPDX-License-Identifier: Apache-2.0

//! Python bindings: load and run scenarios, read reports, run benchmarks.

use dpti_core::bench;
use dpti_core::costmodel::CostTable;
use dpti_core::report;
use dpti_core::tasks::sched::{ScheduleMode, DEFAULT_MAX_STEPS};
use dpti_core::{Scenario as CoreScenario, SimReport, Variant};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_costs(costs_json: Option<&str>) -> PyResult<CostTable> {
    let Some(text) = costs_json else { return Ok(CostTable::default()) };
    let table: CostTable = serde_json::from_str(text).map_err(value_error)?;
    table.validate().map_err(value_error)?;
    Ok(table)
}

/// A parsed scenario document.
#[pyclass(module = "dpti", skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: CoreScenario,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreScenario::from_json(text).map(|inner| Scenario { inner }).map_err(value_error)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyOSError::new_err(format!("{path}: {e}")))?;
        Self::from_json(&text)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.as_str()
    }

    #[setter]
    fn set_variant(&mut self, v: &str) -> PyResult<()> {
        self.inner.variant = v.parse::<Variant>().map_err(value_error)?;
        Ok(())
    }

    /// Runs the scenario. Without arguments the schedule from the file is
    /// used; `seed` picks a seeded run and `exhaustive` explores every
    /// interleaving up to `max_steps` scheduler decisions.
    #[pyo3(signature = (seed=None, exhaustive=false, max_steps=None))]
    fn run(&self, py: Python<'_>, seed: Option<u64>, exhaustive: bool, max_steps: Option<usize>) -> PyResult<Report> {
        let mut s = self.inner.clone();
        if exhaustive || max_steps.is_some() {
            s.schedule = ScheduleMode::Exhaustive { max_steps: max_steps.unwrap_or(DEFAULT_MAX_STEPS) };
        } else if let Some(seed) = seed {
            s.schedule = ScheduleMode::Seeded { seed };
        }
        let r = py.detach(|| report::run(&s)).map_err(value_error)?;
        Ok(Report { inner: r })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, variant={:?})", self.inner.name, self.inner.variant.as_str())
    }
}

/// Outcome of running a scenario.
#[pyclass(module = "dpti")]
struct Report {
    inner: SimReport,
}

#[pymethods]
impl Report {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        SimReport::from_json(text).map(|inner| Report { inner }).map_err(value_error)
    }

    #[getter]
    fn passed(&self) -> bool {
        self.inner.passed()
    }

    #[getter]
    fn interleavings(&self) -> u64 {
        self.inner.interleavings
    }

    #[getter]
    fn witness_count(&self) -> u64 {
        self.inner.witness_count
    }

    #[getter]
    fn violation_count(&self) -> u64 {
        self.inner.violation_count
    }

    #[getter]
    fn deadlocks(&self) -> u64 {
        self.inner.deadlocks
    }

    #[getter]
    fn total_cycles(&self) -> f64 {
        self.inner.total_cycles
    }

    #[getter]
    fn hash(&self) -> &str {
        &self.inner.hash
    }

    /// `(process, cause, runs)` for every kill observed.
    fn kills(&self) -> Vec<(String, String, u64)> {
        self.inner
            .kills
            .iter()
            .flat_map(|(p, causes)| causes.iter().map(move |(c, n)| (p.clone(), c.as_str().to_string(), *n)))
            .collect()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn verify_hash(&self) -> bool {
        self.inner.hash == self.inner.compute_hash()
    }
}

/// Runs benchmark suites and returns the report as JSON. `suite` is one of
/// `suites()` or None for all; `costs_json` overrides cost constants.
#[pyfunction]
#[pyo3(signature = (suite=None, costs_json=None))]
fn bench_suites(py: Python<'_>, suite: Option<&str>, costs_json: Option<&str>) -> PyResult<String> {
    let costs = parse_costs(costs_json)?;
    let report = py.detach(|| bench::run_suites(suite, &costs)).map_err(PyValueError::new_err)?;
    serde_json::to_string_pretty(&report).map_err(value_error)
}

/// Compares one scenario unfiltered, under the sequential filter and under DPTI.
#[pyfunction]
#[pyo3(signature = (scenario, costs_json=None))]
fn bench_scenario(scenario: &Scenario, costs_json: Option<&str>) -> PyResult<String> {
    let costs = parse_costs(costs_json)?;
    let report = bench::bench_scenario(&scenario.inner, &costs).map_err(value_error)?;
    serde_json::to_string_pretty(&report).map_err(value_error)
}

#[pyfunction]
fn suites() -> Vec<&'static str> {
    bench::SUITES.to_vec()
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    [Variant::Stash, Variant::Freeze, Variant::None].iter().map(|v| v.as_str()).collect()
}

/// The calibrated cost table as JSON.
#[pyfunction]
fn default_costs() -> PyResult<String> {
    serde_json::to_string_pretty(&CostTable::default()).map_err(value_error)
}

#[pymodule]
fn dpti(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(bench_suites, m)?)?;
    m.add_function(wrap_pyfunction!(bench_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(suites, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(default_costs, m)?)?;
    Ok(())
}
