//! Python bindings: models, the OI closed form, controller evaluation,
//! simulation and the verification suites.

use std::path::PathBuf;

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use oi_safety::cli::{self, Plant, ScenarioFile};
use oi_safety::controllers::{self, ConstraintCoeffs, ControllerKind, ControllerSpec};
use oi_safety::integrate::HorizonGrid;
use oi_safety::models::{Aircraft, AircraftParams, DoubleIntegrator, DoubleIntegratorParams};
use oi_safety::sim::{self, SimConfig};
use oi_safety::verify::{self, Suite};
use oi_safety::{Error, Scenario};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn vec(x: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(x)
}

fn kind(name: &str) -> PyResult<ControllerKind> {
    name.parse().map_err(to_py)
}

/// A plant with its safety specification.
#[pyclass(frozen, module = "oi_safety_py")]
struct Model {
    plant: Plant,
}

impl Model {
    fn scenario(&self) -> &dyn Scenario {
        self.plant.as_scenario()
    }

    fn state(&self, x: Vec<f64>) -> PyResult<DVector<f64>> {
        if x.len() != self.scenario().state_dim() {
            return Err(PyValueError::new_err(format!(
                "expected a state of length {}, got {}",
                self.scenario().state_dim(),
                x.len()
            )));
        }
        Ok(vec(x))
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (kappa = 10.0, alpha = 1.0, alpha_b = 1.0))]
    fn double_integrator(kappa: f64, alpha: f64, alpha_b: f64) -> PyResult<Self> {
        let m = DoubleIntegrator::new(DoubleIntegratorParams { kappa, alpha, alpha_b }).map_err(to_py)?;
        Ok(Self { plant: Plant::DoubleIntegrator(m) })
    }

    /// Aircraft with default parameters, optionally overridden by a JSON
    /// object with the same field names as the scenario `model` section.
    #[staticmethod]
    #[pyo3(signature = (params_json = None))]
    fn aircraft(params_json: Option<&str>) -> PyResult<Self> {
        let params: AircraftParams = match params_json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => AircraftParams::default(),
        };
        Ok(Self { plant: Plant::Aircraft(Aircraft::new(params).map_err(to_py)?) })
    }

    #[getter]
    fn name(&self) -> String {
        self.scenario().name().to_string()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.scenario().state_dim()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.scenario().input_dim()
    }

    /// `(lower, upper)` of the input box.
    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.scenario().input_box();
        (b.lower().as_slice().to_vec(), b.upper().as_slice().to_vec())
    }

    fn h(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.scenario().h(&self.state(x)?))
    }

    fn h_b(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.scenario().h_b(&self.state(x)?))
    }

    fn dynamics(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.state(x)?;
        if u.len() != self.scenario().input_dim() {
            return Err(PyValueError::new_err("input has the wrong length"));
        }
        let xdot = oi_safety::system::eval_dynamics(self.scenario(), &x, &vec(u)).map_err(to_py)?;
        Ok(xdot.as_slice().to_vec())
    }

    fn primary_control(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.scenario().primary_control(&self.state(x)?).as_slice().to_vec())
    }

    fn backup_control(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.scenario().backup_control(&self.state(x)?).as_slice().to_vec())
    }

    /// Trim state of the aircraft at position `(p_n, p_e)` and heading `psi`.
    #[pyo3(signature = (p_n = 0.0, p_e = 0.0, psi = 0.0))]
    fn trim_state(&self, p_n: f64, p_e: f64, psi: f64) -> PyResult<Vec<f64>> {
        match &self.plant {
            Plant::Aircraft(ac) => Ok(ac.trim_state([p_n, p_e], psi).as_slice().to_vec()),
            Plant::DoubleIntegrator(_) => Err(PyValueError::new_err("trim_state is only defined for the aircraft")),
        }
    }

    fn __repr__(&self) -> String {
        format!("Model('{}', n={}, m={})", self.name(), self.state_dim(), self.input_dim())
    }
}

/// Closed-form `mu*` for the flow/backup rows `a + b mu >= 0`.
#[pyfunction]
fn oi_mu_star<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let c = ConstraintCoeffs::from_rows(a, b).map_err(to_py)?;
    let s = controllers::oi_mu_star(&c);
    let d = PyDict::new(py);
    d.set_item("raw", s.raw)?;
    d.set_item("mu", s.mu)?;
    d.set_item("binding_index", s.binding_index)?;
    d.set_item("out_of_domain", s.out_of_domain)?;
    Ok(d)
}

/// KKT residuals of `mu` with multiplier on `binding_index`.
#[pyfunction]
fn kkt_check<'py>(
    py: Python<'py>,
    a: Vec<f64>,
    b: Vec<f64>,
    mu: f64,
    binding_index: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let c = ConstraintCoeffs::from_rows(a, b).map_err(to_py)?;
    if binding_index >= c.len() {
        return Err(PyValueError::new_err("binding_index out of range"));
    }
    let r = controllers::kkt_check(&c, mu, binding_index);
    let d = PyDict::new(py);
    d.set_item("passed", r.passed())?;
    d.set_item("min_slack", r.min_slack)?;
    d.set_item("primal_violations", r.primal_violations.clone())?;
    d.set_item("dual", r.dual)?;
    d.set_item("complementarity", r.complementarity)?;
    d.set_item("stationarity", r.stationarity)?;
    Ok(d)
}

/// Evaluate one controller at `x`. Returns `(u, mu, status)`.
#[pyfunction]
#[pyo3(signature = (model, controller, x, horizon = 2.0, intervals = 100, dt_int = 0.01, eta = 10.0))]
fn evaluate_controller(
    model: &Model,
    controller: &str,
    x: Vec<f64>,
    horizon: f64,
    intervals: usize,
    dt_int: f64,
    eta: f64,
) -> PyResult<(Vec<f64>, Option<f64>, String)> {
    let grid = HorizonGrid::new(horizon, intervals, dt_int).map_err(to_py)?;
    let spec = ControllerSpec { kind: kind(controller)?, grid, eta };
    let out = spec.evaluate(model.scenario(), &model.state(x)?).map_err(to_py)?;
    Ok((out.u.as_slice().to_vec(), out.mu, out.diagnostics.status.as_str().to_string()))
}

/// Closed-loop simulation. Returns a dict with `t`, `x`, `u`, `mu`, `h`,
/// `h_b` columns and a `metrics` dict.
#[pyfunction]
#[pyo3(signature = (
    model, controller, x0, t_final, dt_ctrl, dt_plant,
    horizon = 2.0, intervals = 100, dt_int = 0.01, eta = 10.0
))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    model: &Model,
    controller: &str,
    x0: Vec<f64>,
    t_final: f64,
    dt_ctrl: f64,
    dt_plant: f64,
    horizon: f64,
    intervals: usize,
    dt_int: f64,
    eta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let grid = HorizonGrid::new(horizon, intervals, dt_int).map_err(to_py)?;
    let cfg = SimConfig {
        t_final,
        dt_ctrl,
        dt_plant,
        x0: model.state(x0)?,
        controller: ControllerSpec { kind: kind(controller)?, grid, eta },
    };
    let scenario = model.scenario();
    let log = py.detach(|| sim::simulate(scenario, &cfg)).map_err(|abort| to_py(abort.error))?;
    let metrics = sim::compute_metrics(&log, scenario.input_box());
    let d = PyDict::new(py);
    d.set_item("t", log.rows.iter().map(|r| r.t).collect::<Vec<_>>())?;
    d.set_item("x", log.rows.iter().map(|r| r.x.as_slice().to_vec()).collect::<Vec<_>>())?;
    d.set_item("u", log.rows.iter().map(|r| r.u.as_slice().to_vec()).collect::<Vec<_>>())?;
    d.set_item("mu", log.rows.iter().map(|r| r.mu).collect::<Vec<_>>())?;
    d.set_item("h", log.rows.iter().map(|r| r.h).collect::<Vec<_>>())?;
    d.set_item("h_b", log.rows.iter().map(|r| r.h_b).collect::<Vec<_>>())?;
    let m = PyDict::new(py);
    m.set_item("min_h", metrics.min_h)?;
    m.set_item("min_h_b_terminal", metrics.min_h_b_terminal)?;
    m.set_item("input_violations", metrics.input_violations)?;
    m.set_item("u_sign_reversals", metrics.u_sign_reversals.clone())?;
    m.set_item("u_sign_reversals_after_contact", metrics.u_sign_reversals_after_contact.clone())?;
    m.set_item("mu_switch_count", metrics.mu_switch_count)?;
    m.set_item("ode_dim", metrics.ode_dim)?;
    m.set_item("out_of_domain_steps", metrics.out_of_domain_steps)?;
    m.set_item("kkt_failures", metrics.kkt_failures)?;
    d.set_item("metrics", m)?;
    Ok(d)
}

/// Run a scenario file and write its CSV/JSON outputs. Returns the list of
/// written paths.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_scenario(py: Python<'_>, config: PathBuf, out_dir: Option<PathBuf>) -> PyResult<Vec<String>> {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let prepared = ScenarioFile::load(&config).and_then(|f| f.prepare(&stem, out_dir.as_deref())).map_err(to_py)?;
    let outcome = py.detach(|| cli::execute(&prepared)).map_err(to_py)?;
    if outcome.exit_code != cli::EXIT_OK {
        return Err(PyRuntimeError::new_err("at least one simulation aborted"));
    }
    Ok(outcome.files.iter().map(|p| p.display().to_string()).collect())
}

/// Run a verification suite; returns `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = cli::DEFAULT_SEED))]
fn verify_suite(py: Python<'_>, suite: &str, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let suite: Suite = suite.parse().map_err(to_py)?;
    let results = py.detach(|| verify::run_suite(suite, seed));
    Ok(results.into_iter().map(|r| (r.name, r.passed, r.detail)).collect())
}

#[pymodule]
fn oi_safety_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(oi_mu_star, m)?)?;
    m.add_function(wrap_pyfunction!(kkt_check, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_controller, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    m.add("CONTROLLERS", ControllerKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
