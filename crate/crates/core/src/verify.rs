//! Randomised property suites shared by the CLI `verify` command and the
//! test suite. Every suite is deterministic for a given seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::controllers::{kkt_check, oi_coefficients, oi_coefficients_from_sensitivity, oi_mu_star, ConstraintCoeffs};
use crate::error::{Error, Result};
use crate::integrate::{integrate_flow, integrate_push_forward, integrate_sensitivity, HorizonGrid};
use crate::models::{Aircraft, DoubleIntegrator};
use crate::system::{eval_primary_loop, ControlAffine, SafetySpec, Scenario, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kkt,
    Oracle,
    Sensitivity,
    Invariance,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kkt" => Ok(Suite::Kkt),
            "oracle" => Ok(Suite::Oracle),
            "sensitivity" => Ok(Suite::Sensitivity),
            "invariance" => Ok(Suite::Invariance),
            "all" => Ok(Suite::All),
            _ => Err(Error::invalid(format!(
                "unknown suite '{s}' (expected kkt, oracle, sensitivity, invariance or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<CheckResult> {
    match suite {
        Suite::Kkt => kkt_suite(seed),
        Suite::Oracle => oracle_suite(seed),
        Suite::Sensitivity => sensitivity_suite(seed),
        Suite::Invariance => invariance_suite(seed),
        Suite::All => {
            let mut out = kkt_suite(seed);
            out.extend(oracle_suite(seed));
            out.extend(sensitivity_suite(seed));
            out.extend(invariance_suite(seed));
            out
        }
    }
}

/// Random coefficient set with `n + 2` flow/backup rows that is feasible at
/// `mu = 1`; roughly a quarter of the slopes are negative.
pub fn random_feasible_coeffs(rng: &mut impl Rng, n: usize) -> ConstraintCoeffs {
    let (a, b): (Vec<f64>, Vec<f64>) = (0..n + 2)
        .map(|_| {
            let b: f64 = if rng.random_bool(0.75) { rng.random_range(1e-3..3.0) } else { rng.random_range(-3.0..0.0) };
            // a + b >= 0 keeps mu = 1 feasible.
            let a = if b > 0.0 && rng.random_bool(0.6) {
                rng.random_range(-b..2.0)
            } else {
                -b + rng.random_range(0.0..2.0)
            };
            (a, b)
        })
        .unzip();
    ConstraintCoeffs::from_rows(a, b).expect("finite coefficients")
}

fn feasible_at(c: &ConstraintCoeffs, mu: f64, skip_constant: bool) -> bool {
    (0..c.len()).all(|i| {
        let (a, b) = (c.a()[i], c.b()[i]);
        (skip_constant && b.abs() <= 1e-12 * (1.0 + a.abs())) || a + b * mu >= -1e-12
    })
}

/// Smallest point of the grid `{k * step}` in `[0, 1]` at which every row
/// holds. The feasible set of the rows is an interval, so the first
/// feasible grid point is found by bisection over grid indices, checked
/// against its left neighbour. `skip_constant` ignores rows whose slope is
/// negligible (they do not depend on `mu`).
pub fn grid_oracle(c: &ConstraintCoeffs, step: f64, skip_constant: bool) -> Option<f64> {
    let n = (1.0 / step).round() as usize;
    let at = |k: usize| (k as f64 * step).min(1.0);
    if !feasible_at(c, at(n), skip_constant) {
        return None;
    }
    if feasible_at(c, 0.0, skip_constant) {
        return Some(0.0);
    }
    let (mut lo, mut hi) = (0usize, n);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if feasible_at(c, at(mid), skip_constant) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    debug_assert!(!feasible_at(c, at(hi - 1), skip_constant));
    Some(at(hi))
}

/// Plain linear scan version of [`grid_oracle`].
pub fn grid_oracle_scan(c: &ConstraintCoeffs, step: f64) -> Option<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|k| (k as f64 * step).min(1.0)).find(|&mu| feasible_at(c, mu, false))
}

fn kkt_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut corrupted_detected = 0;
    let mut corrupted_total = 0;
    for _ in 0..1000 {
        let c = random_feasible_coeffs(&mut rng, 20);
        let s = oi_mu_star(&c);
        let r = kkt_check(&c, s.raw, s.binding_index);
        worst = worst.max(r.complementarity).max(r.stationarity);
        if !r.passed() {
            failures += 1;
        }
        if s.binding_index <= c.backup_row() {
            corrupted_total += 1;
            if !kkt_check(&c, s.raw + 0.1, s.binding_index).passed() {
                corrupted_detected += 1;
            }
        }
    }
    vec![
        CheckResult::new(
            "kkt_random_feasible",
            failures == 0,
            format!("1000 instances, {failures} failures, worst residual {worst:.2e}"),
        ),
        CheckResult::new(
            "kkt_detects_corruption",
            corrupted_detected == corrupted_total,
            format!("{corrupted_detected}/{corrupted_total} corrupted mu* rejected"),
        ),
    ]
}

fn oracle_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    let mut missing = 0;
    for _ in 0..1000 {
        let c = random_feasible_coeffs(&mut rng, 20);
        match grid_oracle(&c, 1e-6, false) {
            Some(o) => worst = worst.max((oi_mu_star(&c).mu - o).abs()),
            None => missing += 1,
        }
    }
    let mut scan_worst = 0.0f64;
    for _ in 0..50 {
        let c = random_feasible_coeffs(&mut rng, 20);
        let fast = grid_oracle(&c, 1e-4, false);
        let slow = grid_oracle_scan(&c, 1e-4);
        scan_worst = scan_worst.max(match (fast, slow) {
            (Some(f), Some(s)) => (f - s).abs(),
            _ => f64::INFINITY,
        });
    }
    vec![
        CheckResult::new(
            "closed_form_vs_grid",
            worst <= 2e-6 && missing == 0,
            format!("1000 instances, max |mu* - oracle| = {worst:.2e}, {missing} without oracle"),
        ),
        CheckResult::new(
            "bisection_vs_scan",
            scan_worst == 0.0,
            format!("50 instances at step 1e-4, max gap {scan_worst:.1e}"),
        ),
    ]
}

/// Random aircraft state inside the usual operating envelope.
pub fn random_aircraft_state(rng: &mut impl Rng, ac: &Aircraft) -> StateVec {
    DVector::from_vec(vec![
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.2..0.2),
        rng.random_range(-PI..PI),
        rng.random_range(-5000.0..5000.0),
        rng.random_range(-5000.0..5000.0),
        ac.params().h_star + rng.random_range(-100.0..100.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(0.5..2.0),
    ])
}

pub fn random_di_state(rng: &mut impl Rng) -> StateVec {
    DVector::from_vec(vec![rng.random_range(-2.0..0.5), rng.random_range(-2.0..2.0)])
}

/// `max_i ||q_p(tau_i) - Phi(tau_i) f_p(x)|| / (1 + ||q_p(tau_i)||)` and the
/// same for `q_b` against `f_cl`.
pub fn push_forward_error<M: ControlAffine + ?Sized>(model: &M, x: &StateVec, grid: &HorizonGrid) -> Result<f64> {
    let pf = integrate_push_forward(model, x, grid)?;
    let full = integrate_sensitivity(model, x, grid)?;
    let sens = full.sensitivity.as_ref().expect("sensitivity requested");
    let fp = eval_primary_loop(model, x)?;
    let fb = crate::system::eval_closed_loop(model, x)?;
    let q_p = pf.q_p.as_ref().expect("push-forward requested");
    let q_b = pf.q_b.as_ref().expect("push-forward requested");
    let mut worst = 0.0f64;
    for i in 0..sens.len() {
        worst = worst.max((&q_p[i] - &sens[i] * &fp).norm() / (1.0 + q_p[i].norm()));
        worst = worst.max((&q_b[i] - &sens[i] * &fb).norm() / (1.0 + q_b[i].norm()));
    }
    Ok(worst)
}

/// Largest column-wise relative error between the sensitivity matrices and
/// central differences of the flow (step `fd_step`).
pub fn sensitivity_fd_error<M: ControlAffine + ?Sized>(
    model: &M,
    x: &StateVec,
    grid: &HorizonGrid,
    fd_step: f64,
) -> Result<f64> {
    let full = integrate_sensitivity(model, x, grid)?;
    let sens = full.sensitivity.as_ref().expect("sensitivity requested");
    let n = x.len();
    let mut fd: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); sens.len()];
    for j in 0..n {
        let mut up = x.clone();
        up[j] += fd_step;
        let mut down = x.clone();
        down[j] -= fd_step;
        let fu = integrate_flow(model, &up, grid)?;
        let fdn = integrate_flow(model, &down, grid)?;
        for i in 0..sens.len() {
            fd[i].set_column(j, &((&fu.phi[i] - &fdn.phi[i]) / (2.0 * fd_step)));
        }
    }
    let mut worst = 0.0f64;
    for i in 0..sens.len() {
        for j in 0..n {
            let a = sens[i].column(j);
            let b = fd[i].column(j);
            worst = worst.max((a - b).norm() / (1.0 + a.norm()));
        }
    }
    Ok(worst)
}

/// Coefficients from push-forward vs. from full sensitivity.
pub fn coefficient_equivalence_error<M: Scenario + ?Sized>(model: &M, x: &StateVec, grid: &HorizonGrid) -> Result<f64> {
    let a = oi_coefficients(model, &integrate_push_forward(model, x, grid)?)?;
    let b = oi_coefficients_from_sensitivity(model, x, &integrate_sensitivity(model, x, grid)?)?;
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        worst = worst.max((a.a()[i] - b.a()[i]).abs() / (1.0 + a.a()[i].abs()));
        worst = worst.max((a.b()[i] - b.b()[i]).abs() / (1.0 + a.b()[i].abs()));
    }
    Ok(worst)
}

/// Observed RK4 order from the terminal flow at steps `dt`, `dt/2`, `dt/4`.
pub fn observed_order<M: ControlAffine + ?Sized>(model: &M, x: &StateVec, horizon: f64, dt: f64) -> Result<f64> {
    let end = |h: f64| -> Result<StateVec> {
        let grid = HorizonGrid::new(horizon, 1, h)?;
        Ok(integrate_flow(model, x, &grid)?.terminal().clone())
    };
    let (a, b, c) = (end(dt)?, end(dt / 2.0)?, end(dt / 4.0)?);
    Ok(((&a - &b).norm() / (&b - &c).norm()).log2())
}

fn sensitivity_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10f);
    let di = DoubleIntegrator::default();
    let ac = Aircraft::default();
    let di_grid = HorizonGrid::new(2.0, 20, 0.01).expect("valid grid");
    let ac_grid = HorizonGrid::new(20.0, 40, 0.05).expect("valid grid");

    let mut check = |name: &str, limit: f64, errs: Result<Vec<f64>>| {
        let (passed, detail) = match errs {
            Ok(v) => {
                let worst = v.iter().copied().fold(0.0, f64::max);
                (worst <= limit, format!("{} states, worst {worst:.2e} (limit {limit:.0e})", v.len()))
            }
            Err(e) => (false, format!("error: {e}")),
        };
        out.push(CheckResult::new(name, passed, detail));
    };

    let di_states: Vec<StateVec> = (0..100).map(|_| random_di_state(&mut rng)).collect();
    let ac_states: Vec<StateVec> = (0..100).map(|_| random_aircraft_state(&mut rng, &ac)).collect();
    check(
        "push_forward_double_integrator",
        1e-6,
        di_states.iter().map(|x| push_forward_error(&di, x, &di_grid)).collect(),
    );
    check("push_forward_aircraft", 1e-6, ac_states.iter().map(|x| push_forward_error(&ac, x, &ac_grid)).collect());
    check(
        "coefficients_push_forward_vs_sensitivity",
        1e-8,
        ac_states.iter().take(20).map(|x| coefficient_equivalence_error(&ac, x, &ac_grid)).collect(),
    );
    let fd_grid = HorizonGrid::new(5.0, 10, 0.05).expect("valid grid");
    check(
        "sensitivity_vs_finite_differences_aircraft",
        1e-4,
        ac_states.iter().take(10).map(|x| sensitivity_fd_error(&ac, x, &fd_grid, 1e-5)).collect(),
    );
    let pf = integrate_push_forward(&ac, &ac_states[0], &ac_grid);
    let sf = integrate_sensitivity(&ac, &ac_states[0], &ac_grid);
    let counts = pf.and_then(|p| sf.map(|s| (s.ode_dim, p.ode_dim)));
    out.push(CheckResult::new(
        "ode_counts_aircraft",
        counts.as_ref().is_ok_and(|c| *c == (72, 24)),
        format!("sensitivity/push-forward ODEs: {counts:?}"),
    ));
    // The softplus knee (beta = 20) needs steps of about 0.01 s before the
    // asymptotic regime starts; much smaller steps hit round-off.
    let orders: Result<Vec<f64>> = ac_states[..8].iter().map(|x| observed_order(&ac, x, 5.0, 0.01)).collect();
    let min_order = orders.as_ref().map(|v| v.iter().copied().fold(f64::INFINITY, f64::min));
    out.push(CheckResult::new(
        "rk4_order_aircraft",
        min_order.as_ref().is_ok_and(|o| *o >= 3.5),
        format!("8 states, minimum observed order {min_order:?}"),
    ));
    out
}

/// Sample a state on the aircraft backup orbit with `h_6 >= 0`.
pub fn random_backup_state(rng: &mut impl Rng, ac: &Aircraft) -> StateVec {
    loop {
        let x = ac.orbit_state(
            [rng.random_range(-20_000.0..8_000.0), rng.random_range(-20_000.0..20_000.0)],
            rng.random_range(-PI..PI),
        );
        if ac.h6(&x) >= 0.0 {
            return x;
        }
    }
}

/// For a state on the backup orbit: the drift of `h_6`, the smallest
/// `h_1..h_5` over one integrated period, and the largest gap between the
/// integrated and closed-form positions.
pub fn orbit_check(ac: &Aircraft, x: &StateVec, dt: f64) -> Result<(f64, f64, f64)> {
    let period = ac.turn_period();
    let n = (period / dt).round() as usize;
    let grid = HorizonGrid::new(n as f64 * dt, n, dt)?;
    let bundle = integrate_flow(ac, x, &grid)?;
    let h6_0 = ac.h6(x);
    let mut drift = 0.0f64;
    let mut band_min = f64::INFINITY;
    let mut pos_err = 0.0f64;
    for (i, p) in bundle.phi.iter().enumerate() {
        let comps = ac.backup_components(p);
        drift = drift.max((comps[5] - h6_0).abs());
        band_min = comps[..5].iter().copied().fold(band_min, f64::min);
        let cf = ac.orbit_position(x, grid.sample_time(i));
        pos_err = pos_err.max((p[3] - cf[0]).hypot(p[4] - cf[1]));
    }
    Ok((drift, band_min, pos_err))
}

fn invariance_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1417);
    let ac = Aircraft::default();
    let mut drift = 0.0f64;
    let mut band = f64::INFINITY;
    let mut pos = 0.0f64;
    let mut error = None;
    for _ in 0..50 {
        let x = random_backup_state(&mut rng, &ac);
        match orbit_check(&ac, &x, 0.05) {
            Ok((d, b, p)) => {
                drift = drift.max(d);
                band = band.min(b);
                pos = pos.max(p);
            }
            Err(e) => error = Some(e),
        }
    }
    let mut hb_ok = true;
    let mut inside_ok = true;
    for _ in 0..1000 {
        let x = random_aircraft_state(&mut rng, &ac);
        let comps = ac.backup_components(&x);
        hb_ok &= comps.iter().all(|c| ac.h_b(&x) <= *c);
        inside_ok &= ac.h(&x) >= ac.h6(&x);
    }
    let di = DoubleIntegrator::default();
    let di_grid = HorizonGrid::new(10.0, 100, 0.01).expect("valid grid");
    let mut di_ok = true;
    for _ in 0..200 {
        let x = DVector::from_vec(vec![-rng.random_range(0.0..3.0), -rng.random_range(0.0..3.0)]);
        match integrate_flow(&di, &x, &di_grid) {
            Ok(b) => di_ok &= b.phi.iter().all(|p| p[0] <= 0.0 && p[1] <= 0.0),
            Err(_) => di_ok = false,
        }
    }
    vec![
        CheckResult::new(
            "aircraft_backup_orbit_invariance",
            error.is_none() && drift <= 1e-6 && band >= 0.0,
            match error {
                Some(e) => format!("error: {e}"),
                None => format!("50 orbits, h6 drift {drift:.2e}, min h1..h5 {band:.3e}"),
            },
        ),
        CheckResult::new("aircraft_closed_form_position", pos <= 1e-6, format!("max position gap {pos:.2e} m")),
        CheckResult::new("aircraft_backup_set_inside_safe_set", hb_ok && inside_ok, "1000 random states".into()),
        CheckResult::new("double_integrator_backup_invariance", di_ok, "200 states in C_B, 10 s".into()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_coeffs_are_feasible_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = random_feasible_coeffs(&mut rng, 20);
            assert!((0..c.len()).all(|i| c.slack(i, 1.0) >= -1e-12));
        }
    }

    #[test]
    fn oracle_examples() {
        let c = ConstraintCoeffs::from_rows(vec![-0.3, 1.0], vec![0.6, 0.0]).unwrap();
        assert!((grid_oracle(&c, 1e-6, false).unwrap() - 0.5).abs() <= 1e-6);
        let c = ConstraintCoeffs::from_rows(vec![0.3, 1.0], vec![0.6, 0.0]).unwrap();
        assert_eq!(grid_oracle(&c, 1e-6, false), Some(0.0));
        // Constant violated row: infeasible unless skipped.
        let c = ConstraintCoeffs::from_rows(vec![-0.1, -0.3], vec![0.0, 0.6]).unwrap();
        assert_eq!(grid_oracle(&c, 1e-6, false), None);
        assert!((grid_oracle(&c, 1e-6, true).unwrap() - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn suite_names_parse() {
        for s in ["kkt", "oracle", "sensitivity", "invariance", "all"] {
            assert!(s.parse::<Suite>().is_ok());
        }
        assert!("everything".parse::<Suite>().is_err());
    }
}
