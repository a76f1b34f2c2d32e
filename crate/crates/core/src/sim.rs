//! Zero-order-hold closed-loop simulation, trajectory logs and metrics.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerSpec, KktReport, SolverStatus};
use crate::error::{Error, Result};
use crate::integrate::Rk4;
use crate::system::{ensure_finite, eval_dynamics, ControlVec, InputBox, Scenario, StateVec};

/// Magnitude below which a control value has no sign for reversal counting.
pub const SIGN_DEADBAND: f64 = 1e-3;
/// Boundary contact: first row with `h <= CONTACT_FRACTION * h(x0)`.
pub const CONTACT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub t_final: f64,
    pub dt_ctrl: f64,
    pub dt_plant: f64,
    pub x0: StateVec,
    pub controller: ControllerSpec,
}

impl SimConfig {
    /// Number of control intervals; checks the timing invariants.
    pub fn steps(&self) -> Result<usize> {
        if !(self.t_final.is_finite() && self.t_final >= 0.0) {
            return Err(Error::invalid(format!("t_final must be >= 0, got {}", self.t_final)));
        }
        if !(self.dt_ctrl.is_finite() && self.dt_ctrl > 0.0) {
            return Err(Error::invalid(format!("dt_ctrl must be > 0, got {}", self.dt_ctrl)));
        }
        if !(self.dt_plant.is_finite() && self.dt_plant > 0.0) {
            return Err(Error::invalid(format!("dt_plant must be > 0, got {}", self.dt_plant)));
        }
        let steps = (self.t_final / self.dt_ctrl).round();
        if (steps * self.dt_ctrl - self.t_final).abs() > 1e-9 * self.t_final.max(1.0) {
            return Err(Error::invalid("t_final must be a multiple of dt_ctrl"));
        }
        self.substeps()?;
        Ok(steps as usize)
    }

    fn substeps(&self) -> Result<usize> {
        let r = (self.dt_ctrl / self.dt_plant).round();
        if r < 1.0 || (r * self.dt_plant - self.dt_ctrl).abs() > 1e-12 * self.dt_ctrl.max(1.0) {
            return Err(Error::invalid(format!("dt_plant {} does not divide dt_ctrl {}", self.dt_plant, self.dt_ctrl)));
        }
        Ok(r as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub x: StateVec,
    pub u: ControlVec,
    pub mu: Option<f64>,
    pub h: f64,
    pub h_b: f64,
    pub h_i: Option<f64>,
    pub binding_index: Option<usize>,
    pub status: SolverStatus,
    pub step_wall_us: f64,
    pub ode_dim: usize,
    pub mu_raw: Option<f64>,
    pub decoupled_violations: usize,
    pub kkt: Option<KktReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &StateVec> {
        self.rows.iter().map(|r| &r.x)
    }
}

/// A run that stopped early; `partial` holds every completed row.
#[derive(Debug, Clone)]
pub struct SimAbort {
    pub partial: TrajectoryLog,
    pub error: Error,
}

impl std::fmt::Display for SimAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "simulation aborted after {} rows: {}", self.partial.len(), self.error)
    }
}

impl std::error::Error for SimAbort {}

/// Run the closed loop. Returns the log, or the partial log and the error
/// that stopped the run. Configuration errors return an empty partial log.
pub fn simulate<M: Scenario + ?Sized>(model: &M, cfg: &SimConfig) -> std::result::Result<TrajectoryLog, SimAbort> {
    let mut log = TrajectoryLog::default();
    match run_into(model, cfg, &mut log) {
        Ok(()) => Ok(log),
        Err(error) => Err(SimAbort { partial: log, error }),
    }
}

fn run_into<M: Scenario + ?Sized>(model: &M, cfg: &SimConfig, log: &mut TrajectoryLog) -> Result<()> {
    let steps = cfg.steps()?;
    let substeps = cfg.substeps()?;
    if cfg.x0.len() != model.state_dim() {
        return Err(Error::invalid(format!(
            "x0 has {} entries, the {} model has {}",
            cfg.x0.len(),
            model.name(),
            model.state_dim()
        )));
    }
    ensure_finite(&cfg.x0, "x0")?;
    let n = model.state_dim();
    let h_step = cfg.dt_ctrl / substeps as f64;
    let mut rk = Rk4::new(n);
    let mut x = cfg.x0.clone();
    log.rows.reserve(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * cfg.dt_ctrl;
        let start = Instant::now();
        let out = cfg.controller.evaluate(model, &x)?;
        let wall = start.elapsed().as_secs_f64() * 1e6;
        ensure_finite(&out.u, "control input")?;
        let d = out.diagnostics;
        log.rows.push(LogRow {
            t,
            x: x.clone(),
            u: out.u.clone(),
            mu: out.mu,
            h: model.h(&x),
            h_b: model.h_b(&x),
            h_i: d.h_i,
            binding_index: d.binding_index,
            status: d.status,
            step_wall_us: wall,
            ode_dim: d.ode_dim,
            mu_raw: d.mu_raw,
            decoupled_violations: d.decoupled_violations,
            kkt: d.kkt,
        });
        if k == steps {
            break;
        }
        let u = out.u;
        let mut y: Vec<f64> = x.iter().copied().collect();
        for _ in 0..substeps {
            rk.step(&mut y, h_step, |s, ds| {
                let xs = DVector::from_column_slice(s);
                let v = eval_dynamics(model, &xs, &u)?;
                ds.copy_from_slice(v.as_slice());
                Ok(())
            })?;
        }
        x = DVector::from_vec(y);
        ensure_finite(&x, "plant state")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rows: usize,
    pub min_h: f64,
    /// `h_b` at the final logged state.
    pub min_h_b_terminal: f64,
    /// Rows whose input leaves the box (zero tolerance).
    pub input_violations: usize,
    /// Sign reversals per input channel over the whole run.
    pub u_sign_reversals: Vec<usize>,
    /// Sign reversals per channel from the first boundary contact on.
    pub u_sign_reversals_after_contact: Vec<usize>,
    /// Time of first boundary contact, if any.
    pub contact_time: Option<f64>,
    /// Crossings of `mu = 0.5`.
    pub mu_switch_count: usize,
    pub mean_step_wall_us: f64,
    pub max_step_wall_us: f64,
    /// Scalar ODEs advanced per integration step by the controller.
    pub ode_dim: usize,
    /// Rows flagged outside the implicit safe set (OI `mu* > 1`).
    pub out_of_domain_steps: usize,
    /// Rows where the QP was infeasible and the backup was applied.
    pub fallback_steps: usize,
    /// Rows with violated input-independent constraint rows.
    pub decoupled_violation_steps: usize,
    /// OI rows whose KKT report is not clean.
    pub kkt_failures: usize,
}

/// Count sign changes of `values`, ignoring entries within the deadband.
pub fn count_sign_reversals(values: impl IntoIterator<Item = f64>) -> usize {
    let mut last = 0.0f64;
    let mut count = 0;
    for v in values {
        if v.abs() > SIGN_DEADBAND {
            if last != 0.0 && v.signum() != last {
                count += 1;
            }
            last = v.signum();
        }
    }
    count
}

/// Count crossings of `mu = 0.5` between consecutive rows that carry `mu`.
pub fn count_mu_switches(values: impl IntoIterator<Item = Option<f64>>) -> usize {
    let mut last: Option<bool> = None;
    let mut count = 0;
    for above in values.into_iter().flatten().map(|m| m > 0.5) {
        if last.is_some_and(|l| l != above) {
            count += 1;
        }
        last = Some(above);
    }
    count
}

pub fn compute_metrics(log: &TrajectoryLog, bounds: &InputBox) -> Metrics {
    compute_metrics_with(log, bounds, CONTACT_FRACTION)
}

/// As [`compute_metrics`] with an explicit contact fraction.
pub fn compute_metrics_with(log: &TrajectoryLog, bounds: &InputBox, contact_fraction: f64) -> Metrics {
    let m = bounds.dim();
    let rows = &log.rows;
    let h0 = rows.first().map_or(0.0, |r| r.h);
    let contact_level = contact_fraction * h0.max(0.0);
    let contact = rows.iter().position(|r| r.h <= contact_level);
    let per_channel = |from: usize| -> Vec<usize> {
        (0..m).map(|j| count_sign_reversals(rows[from..].iter().map(|r| r.u[j]))).collect()
    };
    let walls: Vec<f64> = rows.iter().map(|r| r.step_wall_us).collect();
    Metrics {
        rows: rows.len(),
        min_h: rows.iter().map(|r| r.h).fold(f64::INFINITY, f64::min),
        min_h_b_terminal: rows.last().map_or(f64::NAN, |r| r.h_b),
        input_violations: rows.iter().filter(|r| !bounds.contains(&r.u)).count(),
        u_sign_reversals: per_channel(0),
        u_sign_reversals_after_contact: contact.map_or_else(|| vec![0; m], per_channel),
        contact_time: contact.map(|i| rows[i].t),
        mu_switch_count: count_mu_switches(rows.iter().map(|r| r.mu)),
        mean_step_wall_us: if walls.is_empty() { 0.0 } else { walls.iter().sum::<f64>() / walls.len() as f64 },
        max_step_wall_us: walls.iter().copied().fold(0.0, f64::max),
        ode_dim: rows.iter().map(|r| r.ode_dim).max().unwrap_or(0),
        out_of_domain_steps: rows.iter().filter(|r| r.status == SolverStatus::OutOfDomain).count(),
        fallback_steps: rows
            .iter()
            .filter(|r| matches!(r.status, SolverStatus::Infeasible | SolverStatus::MaxIterations))
            .count(),
        decoupled_violation_steps: rows.iter().filter(|r| r.decoupled_violations > 0).count(),
        kkt_failures: rows.iter().filter(|r| r.kkt.as_ref().is_some_and(|k| !k.passed())).count(),
    }
}

/// Largest state difference (infinity norm) between two logs on their
/// common rows.
pub fn max_state_deviation(a: &TrajectoryLog, b: &TrajectoryLog) -> f64 {
    a.rows.iter().zip(&b.rows).map(|(ra, rb)| (&ra.x - &rb.x).amax()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: String,
    pub controller: String,
    pub metrics: Metrics,
    /// Set when the run aborted; metrics then cover the partial log.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Deviation {
    pub a: String,
    pub b: String,
    pub max_state_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub runs: Vec<RunReport>,
    pub deviations: Vec<Deviation>,
}

/// Simulate every named configuration (in parallel) and tabulate metrics
/// and pairwise state deviations. All configurations must share `x0`,
/// `t_final` and `dt_ctrl`.
pub fn compare_controllers<M: Scenario + ?Sized>(
    model: &M,
    configs: &[(String, SimConfig)],
) -> Result<(Comparison, Vec<(String, TrajectoryLog)>)> {
    if let Some((_, first)) = configs.first() {
        for (name, c) in configs {
            if c.x0 != first.x0 || c.t_final != first.t_final || c.dt_ctrl != first.dt_ctrl {
                return Err(Error::invalid(format!(
                    "run '{name}' differs in x0, t_final or dt_ctrl from the first run"
                )));
            }
        }
    }
    let results: Vec<std::result::Result<TrajectoryLog, SimAbort>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|(_, c)| s.spawn(move || simulate(model, c))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut runs = Vec::with_capacity(configs.len());
    let mut logs = Vec::with_capacity(configs.len());
    for ((name, cfg), res) in configs.iter().zip(results) {
        let (log, error) = match res {
            Ok(log) => (log, None),
            Err(abort) => (abort.partial, Some(abort.error.to_string())),
        };
        runs.push(RunReport {
            name: name.clone(),
            controller: cfg.controller.kind.to_string(),
            metrics: compute_metrics(&log, model.input_box()),
            error,
        });
        logs.push((name.clone(), log));
    }
    let mut deviations = Vec::new();
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            deviations.push(Deviation {
                a: logs[i].0.clone(),
                b: logs[j].0.clone(),
                max_state_deviation: max_state_deviation(&logs[i].1, &logs[j].1),
            });
        }
    }
    Ok((Comparison { runs, deviations }, logs))
}
