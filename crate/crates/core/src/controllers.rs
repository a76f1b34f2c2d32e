//! Safety controllers.
//!
//! * [`cbf_filter_closed_form`]: single-constraint CBF filter for unbounded
//!   inputs, `u = k_p + lambda(a, b) (grad h . g)^T`.
//! * [`bcbf_qp_controller`]: least-distance QP over the discretised backup
//!   constraints, with `k_b` as the fallback when the QP is infeasible.
//! * [`blended_controller`]: `u = (1 - mu) k_p + mu k_b` with
//!   `mu = exp(-eta max(h_I, 0))`.
//! * [`oi_controller`]: the same interpolation with the smallest `mu` that
//!   satisfies every discretised constraint, in closed form.
//!
//! For plants of relative degree two or more the `tau_0` constraint does not
//! depend on the input at all: its coefficient `b_0` (OI) or `c_0` (QP) is
//! identically zero. Such rows cannot be influenced by any controller.
//! Both the OI closed form and the QP skip them, and the number of skipped
//! rows that are violated is reported as `decoupled_violations`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{integrate_flow, integrate_push_forward, integrate_sensitivity, FlowBundle, HorizonGrid};
use crate::qp::{lambda_relu, solve_box_qp, LinearConstraintSet, LinearRow, QpStatus};
use crate::system::{ControlVec, Scenario, StateVec};

/// Relative tolerance for treating a slope coefficient as positive.
pub const SLOPE_TOL: f64 = 1e-12;
/// `mu*` above `1 + DOMAIN_TOL` marks a state outside the implicit safe set.
pub const DOMAIN_TOL: f64 = 1e-9;

#[inline]
fn slope_positive(a: f64, b: f64) -> bool {
    b > SLOPE_TOL * (1.0 + a.abs())
}

#[inline]
fn slope_negligible(a: f64, b: f64) -> bool {
    b.abs() <= SLOPE_TOL * (1.0 + a.abs())
}

/// Coefficients of the interpolation constraints `a_i + b_i mu >= 0`.
///
/// Indices `0..=N` are the flow samples, `N + 1` the backup-set row at
/// `tau_N`, and `N + 2`, `N + 3` encode `mu >= 0` and `mu <= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCoeffs {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ConstraintCoeffs {
    /// Build from the `N + 2` flow and backup-set rows; the two domain rows
    /// are appended.
    pub fn from_rows(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() < 2 {
            return Err(Error::invalid(format!(
                "need matching coefficient lists with at least 2 rows, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("constraint coefficients are not finite".into()));
        }
        a.extend([0.0, 1.0]);
        b.extend([1.0, -1.0]);
        Ok(Self { a, b })
    }

    /// Build from all `N + 4` rows; the domain rows must already carry their
    /// fixed values.
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let k = a.len();
        if k != b.len() || k < 4 {
            return Err(Error::invalid("need matching coefficient lists with at least 4 rows"));
        }
        if a[k - 2] != 0.0 || b[k - 2] != 1.0 || a[k - 1] != 1.0 || b[k - 1] != -1.0 {
            return Err(Error::invalid("domain rows must be (0, 1) and (1, -1)"));
        }
        Self::from_rows(a[..k - 2].to_vec(), b[..k - 2].to_vec())
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Total row count `N + 4`.
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Number of horizon intervals `N`.
    pub fn intervals(&self) -> usize {
        self.a.len() - 4
    }

    /// Index of the backup-set row.
    pub fn backup_row(&self) -> usize {
        self.a.len() - 3
    }

    /// Index of the `mu >= 0` row.
    pub fn lower_row(&self) -> usize {
        self.a.len() - 2
    }

    pub fn slack(&self, i: usize, mu: f64) -> f64 {
        self.a[i] + self.b[i] * mu
    }

    /// Rows that are violated at `mu` but do not depend on `mu`.
    pub fn decoupled_violations(&self, mu: f64) -> usize {
        (0..self.len()).filter(|&i| slope_negligible(self.a[i], self.b[i]) && self.slack(i, mu) < -DOMAIN_TOL).count()
    }
}

/// Outcome of the closed-form `mu*` computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuStar {
    /// `mu*` before clamping.
    pub raw: f64,
    /// Value to apply, in `[0, 1]`.
    pub mu: f64,
    /// Arg-max row, smallest index on ties.
    pub binding_index: usize,
    /// `raw > 1 + 1e-9`: the state is outside the implicit safe set.
    pub out_of_domain: bool,
}

/// `mu* = max { -a_i / b_i : b_i > 1e-12 (1 + |a_i|) }`.
pub fn oi_mu_star(coeffs: &ConstraintCoeffs) -> MuStar {
    let mut raw = f64::NEG_INFINITY;
    let mut binding_index = coeffs.lower_row();
    for (i, (&a, &b)) in coeffs.a.iter().zip(&coeffs.b).enumerate() {
        if slope_positive(a, b) {
            let r = -a / b;
            if r > raw {
                raw = r;
                binding_index = i;
            }
        }
    }
    if raw == 0.0 {
        raw = 0.0; // drop the sign of -0.0
    }
    let out_of_domain = raw > 1.0 + DOMAIN_TOL;
    MuStar { raw, mu: raw.clamp(0.0, 1.0), binding_index, out_of_domain }
}

/// Equivalent form `max_i lambda(a_i, b_i)` (no tolerance on `b_i`).
pub fn oi_mu_star_lambda(coeffs: &ConstraintCoeffs) -> f64 {
    coeffs.a.iter().zip(&coeffs.b).map(|(&a, &b)| lambda_relu(a, b)).fold(0.0, f64::max)
}

/// Residuals of the KKT system of `min mu^2` subject to the coefficient rows,
/// evaluated at a candidate `mu` with multiplier carried by `binding_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `min_i (a_i + b_i mu)`.
    pub min_slack: f64,
    /// Rows with `a_i + b_i mu < -1e-9`.
    pub primal_violations: Vec<usize>,
    /// The subset of `primal_violations` whose slope is negligible.
    pub decoupled_violations: Vec<usize>,
    /// `lambda_j = -a_j / b_j^2` at the binding index.
    pub dual: f64,
    /// `|a_j + b_j mu|`.
    pub complementarity: f64,
    /// `|mu - lambda_j b_j|`.
    pub stationarity: f64,
}

impl KktReport {
    pub fn primal_ok(&self) -> bool {
        self.primal_violations.is_empty()
    }

    pub fn dual_ok(&self) -> bool {
        self.dual >= -1e-12
    }

    pub fn complementarity_ok(&self) -> bool {
        self.complementarity <= 1e-9
    }

    pub fn stationarity_ok(&self) -> bool {
        self.stationarity <= 1e-9
    }

    pub fn passed(&self) -> bool {
        self.primal_ok() && self.dual_ok() && self.complementarity_ok() && self.stationarity_ok()
    }

    /// Short description of the failing conditions, empty when passed.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.primal_ok() {
            out.push(format!(
                "primal: rows {:?} (min slack {:.3e}, {} independent of mu)",
                self.primal_violations,
                self.min_slack,
                self.decoupled_violations.len()
            ));
        }
        if !self.dual_ok() {
            out.push(format!("dual: lambda = {:.3e}", self.dual));
        }
        if !self.complementarity_ok() {
            out.push(format!("complementarity: {:.3e}", self.complementarity));
        }
        if !self.stationarity_ok() {
            out.push(format!("stationarity: {:.3e}", self.stationarity));
        }
        out
    }
}

/// Check the KKT conditions at `(mu, binding_index)`. Never fails; the
/// report lists every violated condition.
pub fn kkt_check(coeffs: &ConstraintCoeffs, mu: f64, binding_index: usize) -> KktReport {
    let mut min_slack = f64::INFINITY;
    let mut primal_violations = Vec::new();
    let mut decoupled_violations = Vec::new();
    for i in 0..coeffs.len() {
        let s = coeffs.slack(i, mu);
        min_slack = min_slack.min(s);
        if s < -1e-9 {
            primal_violations.push(i);
            if slope_negligible(coeffs.a[i], coeffs.b[i]) {
                decoupled_violations.push(i);
            }
        }
    }
    let (a, b) = (coeffs.a[binding_index], coeffs.b[binding_index]);
    let dual = if b == 0.0 { f64::NEG_INFINITY } else { -a / (b * b) };
    KktReport {
        min_slack,
        primal_violations,
        decoupled_violations,
        dual,
        complementarity: (a + b * mu).abs(),
        stationarity: (mu - dual * b).abs(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    /// Closed-form evaluation (CBF filter, OI).
    ClosedForm,
    /// QP solved to optimality.
    Optimal,
    /// QP infeasible; backup control applied.
    Infeasible,
    /// QP iteration cap hit; backup control applied.
    MaxIterations,
    /// OI `mu*` exceeded one; backup control applied.
    OutOfDomain,
    /// No optimisation involved (blending, pass-through controllers).
    Direct,
}

impl SolverStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverStatus::ClosedForm => "closed_form",
            SolverStatus::Optimal => "optimal",
            SolverStatus::Infeasible => "infeasible",
            SolverStatus::MaxIterations => "max_iterations",
            SolverStatus::OutOfDomain => "out_of_domain",
            SolverStatus::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub binding_index: Option<usize>,
    pub status: SolverStatus,
    pub h_i: Option<f64>,
    /// Unprojected input (CBF filter only).
    pub raw_u: Option<ControlVec>,
    /// Whether box projection altered `raw_u`.
    pub projected: bool,
    /// Violated constraint rows that no input can affect.
    pub decoupled_violations: usize,
    /// Scalar ODEs advanced per integration step.
    pub ode_dim: usize,
    /// Unclamped `mu*` (OI only).
    pub mu_raw: Option<f64>,
    /// KKT residuals at `mu*` (OI only).
    pub kkt: Option<KktReport>,
}

impl Diagnostics {
    fn new(status: SolverStatus) -> Self {
        Self {
            binding_index: None,
            status,
            h_i: None,
            raw_u: None,
            projected: false,
            decoupled_violations: 0,
            ode_dim: 0,
            mu_raw: None,
            kkt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerOutput {
    pub u: ControlVec,
    pub mu: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// `k_p + mu (k_b - k_p)` with exact endpoints, kept inside the box.
fn interpolate<M: Scenario + ?Sized>(model: &M, kp: &ControlVec, kb: &ControlVec, mu: f64) -> ControlVec {
    if mu == 0.0 {
        kp.clone()
    } else if mu == 1.0 {
        kb.clone()
    } else {
        model.input_box().project(&(kp + (kb - kp) * mu))
    }
}

/// Closed-form CBF filter, ignoring the input bounds; the reported `u` is
/// projected onto the box, the raw value is kept in the diagnostics.
pub fn cbf_filter_closed_form<M: Scenario + ?Sized>(model: &M, x: &StateVec) -> Result<ControllerOutput> {
    let kp = model.primary_control(x);
    let grad = model.grad_h(x);
    let lg = model.input_matrix(x)?.transpose() * &grad;
    let hdot = grad.dot(&(model.drift(x)? + model.input_matrix(x)? * &kp));
    let a = hdot + model.alpha().eval(model.h(x));
    let b = lg.norm_squared();
    let mu_hat = lambda_relu(a, b);
    let raw = &kp + &lg * mu_hat;
    let u = model.input_box().project(&raw);
    let mut diag = Diagnostics::new(SolverStatus::ClosedForm);
    diag.projected = u != raw;
    diag.raw_u = Some(raw);
    Ok(ControllerOutput { u, mu: None, diagnostics: diag })
}

/// `min( min_i h(phi_i), h_b(phi_N) )`.
pub fn h_i_eval<M: Scenario + ?Sized>(model: &M, bundle: &FlowBundle) -> f64 {
    let flow_min = bundle.phi.iter().map(|p| model.h(p)).fold(f64::INFINITY, f64::min);
    flow_min.min(model.h_b(bundle.terminal()))
}

/// Rows `c . u + d >= 0` of the backup-CBF QP: one per flow sample and one
/// for the backup set at `tau_N`. Requires the sensitivity matrices.
pub fn bcbf_constraint_rows<M: Scenario + ?Sized>(
    model: &M,
    x: &StateVec,
    bundle: &FlowBundle,
) -> Result<LinearConstraintSet> {
    let sens = bundle
        .sensitivity
        .as_ref()
        .ok_or_else(|| Error::invalid("bCBF rows need a bundle with sensitivity matrices"))?;
    let f = model.drift(x)?;
    let g = model.input_matrix(x)?;
    let mut rows = Vec::with_capacity(bundle.phi.len() + 1);
    let alpha = model.alpha();
    for (p, s) in bundle.phi.iter().zip(sens) {
        let w = s.transpose() * model.grad_h(p);
        rows.push(LinearRow::new(g.transpose() * &w, w.dot(&f) + alpha.eval(model.h(p))));
    }
    let p = bundle.terminal();
    let s = sens.last().expect("non-empty");
    let w = s.transpose() * model.grad_h_b(p);
    rows.push(LinearRow::new(g.transpose() * &w, w.dot(&f) + model.alpha_b().eval(model.h_b(p))));
    for r in &rows {
        if !(r.d.is_finite() && r.c.iter().all(|v| v.is_finite())) {
            return Err(Error::Numerical("non-finite bCBF constraint row".into()));
        }
    }
    Ok(LinearConstraintSet::new(rows, model.input_box().clone()))
}

fn row_decoupled(row: &LinearRow) -> bool {
    row.c.amax() <= SLOPE_TOL * (1.0 + row.d.abs())
}

/// Backup-CBF QP. Rows that do not depend on `u` are excluded from the QP
/// (counted in `decoupled_violations` when violated); an infeasible QP
/// returns `k_b(x)`.
pub fn bcbf_qp_controller<M: Scenario + ?Sized>(
    model: &M,
    grid: &HorizonGrid,
    x: &StateVec,
) -> Result<ControllerOutput> {
    let bundle = integrate_sensitivity(model, x, grid)?;
    let full = bcbf_constraint_rows(model, x, &bundle)?;
    let mut decoupled = 0;
    let rows: Vec<LinearRow> = full
        .rows
        .into_iter()
        .filter(|r| {
            if row_decoupled(r) {
                if r.d < -DOMAIN_TOL {
                    decoupled += 1;
                }
                false
            } else {
                true
            }
        })
        .collect();
    let cs = LinearConstraintSet::new(rows, full.bounds);
    let kp = model.primary_control(x);
    let sol = solve_box_qp(&kp, &cs);
    let status = match sol.status {
        QpStatus::Optimal => SolverStatus::Optimal,
        QpStatus::Infeasible => SolverStatus::Infeasible,
        QpStatus::MaxIterations => SolverStatus::MaxIterations,
    };
    let u = if status == SolverStatus::Optimal { sol.u_star } else { model.backup_control(x) };
    let mut diag = Diagnostics::new(status);
    diag.h_i = Some(h_i_eval(model, &bundle));
    diag.decoupled_violations = decoupled;
    diag.ode_dim = bundle.ode_dim;
    Ok(ControllerOutput { u, mu: None, diagnostics: diag })
}

/// `Lambda(h_I) = exp(-eta max(h_I, 0))`.
pub fn blending_weight(h_i: f64, eta: f64) -> f64 {
    (-eta * h_i.max(0.0)).exp()
}

/// Function-based blending of `k_p` and `k_b`.
pub fn blended_controller<M: Scenario + ?Sized>(
    model: &M,
    grid: &HorizonGrid,
    eta: f64,
    x: &StateVec,
) -> Result<ControllerOutput> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
    }
    let bundle = integrate_flow(model, x, grid)?;
    let h_i = h_i_eval(model, &bundle);
    let mu = blending_weight(h_i, eta);
    let kp = model.primary_control(x);
    let kb = model.backup_control(x);
    let mut diag = Diagnostics::new(SolverStatus::Direct);
    diag.h_i = Some(h_i);
    diag.ode_dim = bundle.ode_dim;
    Ok(ControllerOutput { u: interpolate(model, &kp, &kb, mu), mu: Some(mu), diagnostics: diag })
}

/// Interpolation coefficients from the push-forward vectors.
pub fn oi_coefficients<M: Scenario + ?Sized>(model: &M, bundle: &FlowBundle) -> Result<ConstraintCoeffs> {
    let (q_p, q_b) = match (&bundle.q_p, &bundle.q_b) {
        (Some(p), Some(b)) => (p, b),
        _ => return Err(Error::invalid("OI coefficients need a bundle with push-forward vectors")),
    };
    let n = bundle.phi.len();
    let mut a = Vec::with_capacity(n + 1);
    let mut b = Vec::with_capacity(n + 1);
    let alpha = model.alpha();
    for i in 0..n {
        let grad = model.grad_h(&bundle.phi[i]);
        let hp = grad.dot(&q_p[i]);
        a.push(hp + alpha.eval(model.h(&bundle.phi[i])));
        b.push(grad.dot(&q_b[i]) - hp);
    }
    let p = bundle.terminal();
    let grad = model.grad_h_b(p);
    let hp = grad.dot(&q_p[n - 1]);
    a.push(hp + model.alpha_b().eval(model.h_b(p)));
    b.push(grad.dot(&q_b[n - 1]) - hp);
    ConstraintCoeffs::from_rows(a, b)
}

/// Same coefficients computed from the full sensitivity matrices.
pub fn oi_coefficients_from_sensitivity<M: Scenario + ?Sized>(
    model: &M,
    x: &StateVec,
    bundle: &FlowBundle,
) -> Result<ConstraintCoeffs> {
    let sens = bundle.sensitivity.as_ref().ok_or_else(|| Error::invalid("bundle has no sensitivity matrices"))?;
    let fp = crate::system::eval_primary_loop(model, x)?;
    let fb = crate::system::eval_closed_loop(model, x)?;
    let n = bundle.phi.len();
    let mut a = Vec::with_capacity(n + 1);
    let mut b = Vec::with_capacity(n + 1);
    for i in 0..n {
        let p = &bundle.phi[i];
        let w: DVector<f64> = sens[i].transpose() * model.grad_h(p);
        let hp = w.dot(&fp);
        a.push(hp + model.alpha().eval(model.h(p)));
        b.push(w.dot(&fb) - hp);
    }
    let p = bundle.terminal();
    let w: DVector<f64> = sens[n - 1].transpose() * model.grad_h_b(p);
    let hp = w.dot(&fp);
    a.push(hp + model.alpha_b().eval(model.h_b(p)));
    b.push(w.dot(&fb) - hp);
    ConstraintCoeffs::from_rows(a, b)
}

/// Optimally interpolated controller `k_p + mu* (k_b - k_p)`.
pub fn oi_controller<M: Scenario + ?Sized>(model: &M, grid: &HorizonGrid, x: &StateVec) -> Result<ControllerOutput> {
    let bundle = integrate_push_forward(model, x, grid)?;
    let coeffs = oi_coefficients(model, &bundle)?;
    let star = oi_mu_star(&coeffs);
    let kp = model.primary_control(x);
    let kb = model.backup_control(x);
    let mut diag =
        Diagnostics::new(if star.out_of_domain { SolverStatus::OutOfDomain } else { SolverStatus::ClosedForm });
    diag.binding_index = Some(star.binding_index);
    diag.h_i = Some(h_i_eval(model, &bundle));
    diag.ode_dim = bundle.ode_dim;
    diag.mu_raw = Some(star.raw);
    diag.decoupled_violations = coeffs.decoupled_violations(star.mu);
    diag.kkt = Some(kkt_check(&coeffs, star.raw, star.binding_index));
    Ok(ControllerOutput { u: interpolate(model, &kp, &kb, star.mu), mu: Some(star.mu), diagnostics: diag })
}

/// Controller selection used by the simulator and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Cbf,
    BcbfQp,
    Blended,
    Oi,
    Nominal,
    Backup,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Cbf,
        ControllerKind::BcbfQp,
        ControllerKind::Blended,
        ControllerKind::Oi,
        ControllerKind::Nominal,
        ControllerKind::Backup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Cbf => "cbf",
            ControllerKind::BcbfQp => "bcbf_qp",
            ControllerKind::Blended => "blended",
            ControllerKind::Oi => "oi",
            ControllerKind::Nominal => "nominal",
            ControllerKind::Backup => "backup",
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown controller '{s}'")))
    }
}

/// A controller together with its horizon grid and blending sharpness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub grid: HorizonGrid,
    pub eta: f64,
}

impl ControllerSpec {
    pub fn evaluate<M: Scenario + ?Sized>(&self, model: &M, x: &StateVec) -> Result<ControllerOutput> {
        match self.kind {
            ControllerKind::Cbf => cbf_filter_closed_form(model, x),
            ControllerKind::BcbfQp => bcbf_qp_controller(model, &self.grid, x),
            ControllerKind::Blended => blended_controller(model, &self.grid, self.eta, x),
            ControllerKind::Oi => oi_controller(model, &self.grid, x),
            ControllerKind::Nominal => Ok(ControllerOutput {
                u: model.primary_control(x),
                mu: None,
                diagnostics: Diagnostics::new(SolverStatus::Direct),
            }),
            ControllerKind::Backup => Ok(ControllerOutput {
                u: model.backup_control(x),
                mu: None,
                diagnostics: Diagnostics::new(SolverStatus::Direct),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DoubleIntegrator;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn coeffs(a: &[f64], b: &[f64]) -> ConstraintCoeffs {
        ConstraintCoeffs::from_rows(a.to_vec(), b.to_vec()).unwrap()
    }

    /// Smallest `mu` on a uniform grid over `[0, 1]` satisfying every row.
    fn grid_oracle(c: &ConstraintCoeffs, step: f64) -> Option<f64> {
        let n = (1.0 / step).round() as usize;
        (0..=n).map(|k| k as f64 * step).find(|&mu| (0..c.len()).all(|i| c.slack(i, mu) >= -1e-12))
    }

    #[test]
    fn domain_rows_are_fixed() {
        let c = coeffs(&[0.5, 0.2], &[0.1, 0.3]);
        assert_eq!(c.len(), 4);
        assert_eq!(&c.a()[2..], &[0.0, 1.0]);
        assert_eq!(&c.b()[2..], &[1.0, -1.0]);
        assert!(ConstraintCoeffs::new(vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn mu_star_examples() {
        let c = coeffs(&[0.4, 1.0], &[0.5, 0.2]);
        let s = oi_mu_star(&c);
        assert_eq!(s.mu, 0.0);
        assert_eq!(s.binding_index, c.lower_row());

        let c = coeffs(&[-0.3, 1.0], &[0.6, 0.0]);
        let s = oi_mu_star(&c);
        assert_eq!(s.mu, 0.5);
        assert_eq!(s.binding_index, 0);
        assert_abs_diff_eq!(grid_oracle(&c, 1e-6).unwrap(), 0.5, epsilon = 2e-6);

        let c = coeffs(&[-1.0, 1.0], &[1.0, 0.0]);
        let s = oi_mu_star(&c);
        assert_eq!(s.mu, 1.0);
        assert!(!s.out_of_domain);

        let c = coeffs(&[-2.0, 1.0], &[1.0, 0.0]);
        let s = oi_mu_star(&c);
        assert_eq!(s.raw, 2.0);
        assert_eq!(s.mu, 1.0);
        assert!(s.out_of_domain);
    }

    #[test]
    fn ties_pick_smallest_index() {
        let c = coeffs(&[-0.2, -0.4, -0.2], &[1.0, 2.0, 1.0]);
        assert_eq!(oi_mu_star(&c).binding_index, 0);
        // A zero ratio in a flow row ties with the mu >= 0 row.
        let c = coeffs(&[0.0, 1.0], &[3.0, 1.0]);
        let s = oi_mu_star(&c);
        assert_eq!(s.binding_index, 0);
        assert!(s.mu == 0.0 && s.mu.is_sign_positive());
    }

    #[test]
    fn kkt_examples() {
        let c = coeffs(&[0.4, 1.0], &[0.5, 0.2]);
        let s = oi_mu_star(&c);
        let r = kkt_check(&c, s.raw, s.binding_index);
        assert!(r.passed());
        assert_eq!(r.dual, 0.0);
        assert_eq!(r.complementarity, 0.0);
        assert_eq!(r.stationarity, 0.0);

        let c = coeffs(&[-0.3, 1.0], &[0.6, 0.1]);
        let s = oi_mu_star(&c);
        assert!(kkt_check(&c, s.raw, s.binding_index).passed());
        let bad = kkt_check(&c, s.raw + 0.1, s.binding_index);
        assert!(!bad.complementarity_ok());
        assert!(!bad.passed());
    }

    #[test]
    fn decoupled_rows_are_reported() {
        let c = coeffs(&[-0.1, -0.3, 1.0], &[0.0, 0.6, 0.0]);
        let s = oi_mu_star(&c);
        assert_eq!(s.mu, 0.5);
        let r = kkt_check(&c, s.raw, s.binding_index);
        assert_eq!(r.primal_violations, vec![0]);
        assert_eq!(r.decoupled_violations, vec![0]);
        assert_eq!(c.decoupled_violations(s.mu), 1);
    }

    #[test]
    fn lambda_form_agrees() {
        let c = coeffs(&[-0.3, 0.2, -0.05], &[0.6, -1.0, 0.5]);
        assert_abs_diff_eq!(oi_mu_star(&c).mu, oi_mu_star_lambda(&c), epsilon = 1e-15);
    }

    #[test]
    fn blending_weight_examples() {
        assert_eq!(blending_weight(-1.0, 3.0), 1.0);
        assert_eq!(blending_weight(0.0, 3.0), 1.0);
        assert_abs_diff_eq!(blending_weight(2f64.ln() / 3.0, 3.0), 0.5, epsilon = 1e-15);
        assert!(blending_weight(100.0, 3.0) < 1e-100);
    }

    #[test]
    fn cbf_filter_double_integrator() {
        let m = DoubleIntegrator::default();
        // Relative degree two: grad h . g = 0, the filter passes k_p.
        let out = cbf_filter_closed_form(&m, &DVector::from_vec(vec![-0.1, 1.0])).unwrap();
        assert_eq!(out.u[0], 1.0);
        assert!(!out.diagnostics.projected);
    }

    #[test]
    fn oi_coefficients_at_origin_with_velocity() {
        let m = DoubleIntegrator::default();
        let grid = HorizonGrid::new(2.0, 20, 0.01).unwrap();
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let bundle = integrate_push_forward(&m, &x, &grid).unwrap();
        let c = oi_coefficients(&m, &bundle).unwrap();
        assert_abs_diff_eq!(c.a()[0], -1.0, epsilon = 1e-15);
        assert_eq!(c.b()[0], 0.0);
    }

    #[test]
    fn h_i_examples() {
        let m = DoubleIntegrator::default();
        let grid = HorizonGrid::new(2.0, 20, 0.01).unwrap();
        // Peak of -0.5 + t - t^2/2 is 0 at t = 1, a grid point.
        let b = integrate_flow(&m, &DVector::from_vec(vec![-0.5, 1.0]), &grid).unwrap();
        assert_abs_diff_eq!(h_i_eval(&m, &b), 0.0, epsilon = 1e-12);
        let b = integrate_flow(&m, &DVector::from_vec(vec![0.0, -1.0]), &grid).unwrap();
        assert!(h_i_eval(&m, &b) <= 0.0);
    }

    #[test]
    fn bcbf_tau0_row_matches_plain_cbf() {
        let m = DoubleIntegrator::default();
        let grid = HorizonGrid::new(2.0, 20, 0.01).unwrap();
        let x = DVector::from_vec(vec![-0.3, 0.4]);
        let bundle = integrate_sensitivity(&m, &x, &grid).unwrap();
        let rows = bcbf_constraint_rows(&m, &x, &bundle).unwrap();
        assert_eq!(rows.rows.len(), grid.intervals() + 2);
        // c_0 = grad h . g, d_0 = grad h . f + alpha(h).
        assert_eq!(rows.rows[0].c[0], 0.0);
        assert_abs_diff_eq!(rows.rows[0].d, -0.4 + 0.3, epsilon = 1e-15);
    }

    #[test]
    fn controller_kind_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.as_str().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("mpc".parse::<ControllerKind>().is_err());
    }

    fn feasible_coeffs() -> impl Strategy<Value = ConstraintCoeffs> {
        // Rows with a + b >= 0 (feasible at mu = 1), mixed slope signs.
        proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 2..24).prop_map(|rows| {
            let (a, b): (Vec<f64>, Vec<f64>) =
                rows.into_iter().map(|(a, b)| if a + b >= 0.0 { (a, b) } else { (-b, b) }).unzip();
            ConstraintCoeffs::from_rows(a, b).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn mu_star_matches_grid_oracle(c in feasible_coeffs()) {
            let s = oi_mu_star(&c);
            let oracle = grid_oracle(&c, 1e-4);
            // Coarse grid: oracle is at most one step above the exact value.
            if let Some(o) = oracle {
                prop_assert!(s.mu <= o + 1e-12 && o - s.mu <= 1e-4 + 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&s.mu));
        }

        #[test]
        fn scale_invariance(c in feasible_coeffs(), k in 0usize..30, scale in 0.01f64..100.0) {
            let k = k % (c.len() - 2);
            let (mut a, mut b) = (c.a()[..c.len() - 2].to_vec(), c.b()[..c.len() - 2].to_vec());
            a[k] *= scale;
            b[k] *= scale;
            let scaled = ConstraintCoeffs::from_rows(a, b).unwrap();
            prop_assert!((oi_mu_star(&scaled).raw - oi_mu_star(&c).raw).abs() <= 1e-12 * (1.0 + oi_mu_star(&c).raw.abs()));
        }

        #[test]
        fn adding_rows_never_decreases_mu(c in feasible_coeffs(), extra_a in -2.0f64..2.0, extra_b in -2.0f64..2.0) {
            let mut a = c.a()[..c.len() - 2].to_vec();
            let mut b = c.b()[..c.len() - 2].to_vec();
            a.push(extra_a);
            b.push(extra_b);
            let bigger = ConstraintCoeffs::from_rows(a, b).unwrap();
            prop_assert!(oi_mu_star(&bigger).raw >= oi_mu_star(&c).raw);
        }

        #[test]
        fn kkt_holds_on_feasible_instances(c in feasible_coeffs()) {
            let s = oi_mu_star(&c);
            let r = kkt_check(&c, s.raw, s.binding_index);
            prop_assert!(r.passed(), "{:?}", r.violations());
            if s.mu > 0.0 && s.binding_index <= c.backup_row() {
                prop_assert!(c.slack(s.binding_index, s.mu).abs() <= 1e-9);
            }
        }
    }
}
