//! Fixed-step RK4 integration of the backup flow `phi_b(tau, x)`, its full
//! sensitivity matrix `Phi_b(tau, x)` and the push-forward vectors
//! `q_p = Phi_b f_p(x)`, `q_b = Phi_b f_cl(x)`.
//!
//! All auxiliary ODEs are co-integrated with the flow in one augmented state,
//! so every quantity is sampled on the same RK4 steps. Sample times
//! `tau_i = i * T / N` always land on step boundaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::{eval_closed_loop, eval_primary_loop, ControlAffine, StateVec};

/// Backup horizon discretisation: `N` constraint intervals of length
/// `T / N`, each integrated with an integer number of RK4 substeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonGrid {
    horizon: f64,
    intervals: usize,
    substeps: usize,
}

impl HorizonGrid {
    /// `horizon` is `T`, `intervals` is `N`, `dt_int` the requested
    /// integration step, which must divide `T / N`.
    pub fn new(horizon: f64, intervals: usize, dt_int: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("horizon T must be > 0, got {horizon}")));
        }
        if intervals == 0 {
            return Err(Error::invalid("horizon N must be >= 1"));
        }
        if !(dt_int.is_finite() && dt_int > 0.0) {
            return Err(Error::invalid(format!("integration step must be > 0, got {dt_int}")));
        }
        let delta = horizon / intervals as f64;
        let ratio = (delta / dt_int).round();
        if ratio < 1.0 || (ratio * dt_int - delta).abs() > 1e-12 * delta.max(1.0) {
            return Err(Error::invalid(format!(
                "integration step {dt_int} does not divide the sample spacing {delta}"
            )));
        }
        Ok(Self { horizon, intervals, substeps: ratio as usize })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Sample spacing `Delta = T / N`.
    pub fn delta(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn substeps_per_interval(&self) -> usize {
        self.substeps
    }

    /// Integration step actually used (`Delta / substeps`).
    pub fn step(&self) -> f64 {
        self.delta() / self.substeps as f64
    }

    pub fn sample_time(&self, i: usize) -> f64 {
        i as f64 * self.delta()
    }

    pub fn sample_times(&self) -> Vec<f64> {
        (0..=self.intervals).map(|i| self.sample_time(i)).collect()
    }
}

/// Reusable classical fourth-order Runge-Kutta stepper over flat slices.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self { k1: vec![0.0; dim], k2: vec![0.0; dim], k3: vec![0.0; dim], k4: vec![0.0; dim], tmp: vec![0.0; dim] }
    }

    /// Advance `y` by one step of size `h` for the autonomous system
    /// `y' = rhs(y)`.
    pub fn step<F>(&mut self, y: &mut [f64], h: f64, mut rhs: F) -> Result<()>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let n = y.len();
        debug_assert_eq!(self.k1.len(), n);
        rhs(y, &mut self.k1)?;
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2)?;
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3)?;
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4)?;
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

/// Samples of the backup flow on a [`HorizonGrid`], optionally with the
/// sensitivity matrices or the push-forward vectors.
#[derive(Debug, Clone)]
pub struct FlowBundle {
    pub grid: HorizonGrid,
    /// `phi_b(tau_i, x)`, `i = 0..=N`.
    pub phi: Vec<StateVec>,
    /// `Phi_b(tau_i, x)`.
    pub sensitivity: Option<Vec<DMatrix<f64>>>,
    /// `q_p(tau_i, x)`.
    pub q_p: Option<Vec<StateVec>>,
    /// `q_b(tau_i, x)`.
    pub q_b: Option<Vec<StateVec>>,
    /// Number of scalar ODEs advanced per RK4 step.
    pub ode_dim: usize,
}

impl FlowBundle {
    pub fn terminal(&self) -> &StateVec {
        self.phi.last().expect("flow bundle always holds tau_0")
    }
}

#[derive(Clone, Copy)]
enum Augment {
    None,
    Sensitivity,
    PushForward,
}

fn map_model_err(err: Error, tau: f64) -> Error {
    match err {
        Error::Numerical(_) => Error::DivergedFlow { tau },
        other => other,
    }
}

fn integrate_augmented<M: ControlAffine + ?Sized>(
    model: &M,
    x: &StateVec,
    grid: &HorizonGrid,
    mode: Augment,
) -> Result<FlowBundle> {
    let n = model.state_dim();
    if x.len() != n {
        return Err(Error::invalid(format!("state has dimension {}, model expects {n}", x.len())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("initial state is not finite"));
    }

    let dim = match mode {
        Augment::None => n,
        Augment::Sensitivity => n + n * n,
        Augment::PushForward => 3 * n,
    };
    let mut y = vec![0.0; dim];
    y[..n].copy_from_slice(x.as_slice());
    match mode {
        Augment::None => {}
        Augment::Sensitivity => {
            for i in 0..n {
                y[n + i * n + i] = 1.0;
            }
        }
        Augment::PushForward => {
            let fp = eval_primary_loop(model, x).map_err(|e| map_model_err(e, 0.0))?;
            let fcl = eval_closed_loop(model, x).map_err(|e| map_model_err(e, 0.0))?;
            y[n..2 * n].copy_from_slice(fp.as_slice());
            y[2 * n..].copy_from_slice(fcl.as_slice());
        }
    }

    let samples = grid.intervals() + 1;
    let mut phi = Vec::with_capacity(samples);
    let mut sens = matches!(mode, Augment::Sensitivity).then(|| Vec::with_capacity(samples));
    let mut q_p = matches!(mode, Augment::PushForward).then(|| Vec::with_capacity(samples));
    let mut q_b = matches!(mode, Augment::PushForward).then(|| Vec::with_capacity(samples));

    let record = |y: &[f64],
                  phi: &mut Vec<StateVec>,
                  sens: &mut Option<Vec<DMatrix<f64>>>,
                  q_p: &mut Option<Vec<StateVec>>,
                  q_b: &mut Option<Vec<StateVec>>| {
        phi.push(DVector::from_column_slice(&y[..n]));
        if let Some(s) = sens.as_mut() {
            s.push(DMatrix::from_column_slice(n, n, &y[n..]));
        }
        if let (Some(p), Some(b)) = (q_p.as_mut(), q_b.as_mut()) {
            p.push(DVector::from_column_slice(&y[n..2 * n]));
            b.push(DVector::from_column_slice(&y[2 * n..]));
        }
    };
    record(&y, &mut phi, &mut sens, &mut q_p, &mut q_b);
    // phi[0] is exactly x regardless of rounding in the copy above.
    phi[0] = x.clone();

    let h = grid.step();
    let mut rk = Rk4::new(dim);
    let mut state = StateVec::zeros(n);
    let mut tau = 0.0;
    for i in 1..samples {
        for _ in 0..grid.substeps_per_interval() {
            let cur_tau = tau;
            rk.step(&mut y, h, |yy, dy| {
                state.copy_from_slice(&yy[..n]);
                let fcl = eval_closed_loop(model, &state).map_err(|e| map_model_err(e, cur_tau))?;
                dy[..n].copy_from_slice(fcl.as_slice());
                match mode {
                    Augment::None => {}
                    Augment::Sensitivity => {
                        let jac = model.closed_loop_jacobian(&state).map_err(|e| map_model_err(e, cur_tau))?;
                        let phi_mat = nalgebra::DMatrixView::from_slice(&yy[n..], n, n);
                        let prod = &jac * phi_mat;
                        dy[n..].copy_from_slice(prod.as_slice());
                    }
                    Augment::PushForward => {
                        let jac = model.closed_loop_jacobian(&state).map_err(|e| map_model_err(e, cur_tau))?;
                        for (offset, len) in [(n, n), (2 * n, n)] {
                            let q = nalgebra::DVectorView::from_slice(&yy[offset..offset + len], len);
                            let dq = &jac * q;
                            dy[offset..offset + len].copy_from_slice(dq.as_slice());
                        }
                    }
                }
                Ok(())
            })?;
            tau += h;
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::DivergedFlow { tau });
            }
        }
        tau = grid.sample_time(i);
        record(&y, &mut phi, &mut sens, &mut q_p, &mut q_b);
    }

    Ok(FlowBundle { grid: *grid, phi, sensitivity: sens, q_p, q_b, ode_dim: dim })
}

/// Backup flow samples only (`n` ODEs).
pub fn integrate_flow<M: ControlAffine + ?Sized>(model: &M, x: &StateVec, grid: &HorizonGrid) -> Result<FlowBundle> {
    integrate_augmented(model, x, grid, Augment::None)
}

/// Flow plus full sensitivity matrix (`n + n^2` ODEs).
pub fn integrate_sensitivity<M: ControlAffine + ?Sized>(
    model: &M,
    x: &StateVec,
    grid: &HorizonGrid,
) -> Result<FlowBundle> {
    integrate_augmented(model, x, grid, Augment::Sensitivity)
}

/// Flow plus the push-forward vectors of the primary and backup closed
/// loops (`3n` ODEs).
pub fn integrate_push_forward<M: ControlAffine + ?Sized>(
    model: &M,
    x: &StateVec,
    grid: &HorizonGrid,
) -> Result<FlowBundle> {
    integrate_augmented(model, x, grid, Augment::PushForward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DoubleIntegrator;
    use approx::assert_abs_diff_eq;

    fn di() -> DoubleIntegrator {
        DoubleIntegrator::default()
    }

    #[test]
    fn grid_validation() {
        assert!(HorizonGrid::new(2.0, 2, 0.1).is_ok());
        assert!(HorizonGrid::new(-1.0, 2, 0.1).is_err());
        assert!(HorizonGrid::new(2.0, 0, 0.1).is_err());
        assert!(HorizonGrid::new(2.0, 2, 0.0).is_err());
        assert!(HorizonGrid::new(2.0, 2, 0.3).is_err());
        let g = HorizonGrid::new(20.0, 40, 0.05).unwrap();
        assert_eq!(g.substeps_per_interval(), 10);
        assert_abs_diff_eq!(g.delta(), 0.5);
        assert_eq!(g.sample_times().len(), 41);
    }

    #[test]
    fn double_integrator_flow_is_exact_quadratic() {
        let grid = HorizonGrid::new(2.0, 2, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let b = integrate_flow(&di(), &x, &grid).unwrap();
        let expected = [(0.0, 1.0), (0.5, 0.0), (0.0, -1.0)];
        for (p, (e1, e2)) in b.phi.iter().zip(expected) {
            assert_abs_diff_eq!(p[0], e1, epsilon = 1e-14);
            assert_abs_diff_eq!(p[1], e2, epsilon = 1e-14);
        }
        assert_eq!(b.ode_dim, 2);
    }

    #[test]
    fn double_integrator_sensitivity_is_nilpotent_exponential() {
        let grid = HorizonGrid::new(2.0, 4, 0.05).unwrap();
        let x = DVector::from_vec(vec![-0.3, 0.2]);
        let b = integrate_sensitivity(&di(), &x, &grid).unwrap();
        let sens = b.sensitivity.as_ref().unwrap();
        assert_eq!(sens[0], DMatrix::identity(2, 2));
        for (i, s) in sens.iter().enumerate() {
            let tau = grid.sample_time(i);
            let expected = DMatrix::from_row_slice(2, 2, &[1.0, tau, 0.0, 1.0]);
            assert_abs_diff_eq!(s, &expected, epsilon = 1e-12);
        }
        assert_eq!(b.ode_dim, 6);
    }

    #[test]
    fn double_integrator_push_forward_closed_form() {
        let grid = HorizonGrid::new(2.0, 4, 0.05).unwrap();
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let b = integrate_push_forward(&di(), &x, &grid).unwrap();
        for i in 0..=grid.intervals() {
            let tau = grid.sample_time(i);
            let qp = &b.q_p.as_ref().unwrap()[i];
            let qb = &b.q_b.as_ref().unwrap()[i];
            assert_abs_diff_eq!(qp[0], 1.0 + tau, epsilon = 1e-12);
            assert_abs_diff_eq!(qp[1], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(qb[0], 1.0 - tau, epsilon = 1e-12);
            assert_abs_diff_eq!(qb[1], -1.0, epsilon = 1e-12);
        }
        assert_eq!(b.ode_dim, 6);
    }

    #[test]
    fn rk4_handles_linear_decay() {
        // y' = -y; one step of RK4 reproduces the 4th-order Taylor polynomial.
        let mut rk = Rk4::new(1);
        let mut y = [1.0];
        let h = 0.1;
        rk.step(&mut y, h, |y, dy| {
            dy[0] = -y[0];
            Ok(())
        })
        .unwrap();
        let taylor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert_abs_diff_eq!(y[0], taylor, epsilon = 1e-15);
    }
}
