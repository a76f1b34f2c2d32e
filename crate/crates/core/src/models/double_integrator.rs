use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{smooth_min, smooth_min_grad};
use crate::error::{Error, Result};
use crate::system::{ClassK, ControlAffine, ControlVec, InputBox, SafetySpec, StateVec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleIntegratorParams {
    /// Smoothing of the backup-set minimum.
    pub kappa: f64,
    pub alpha: f64,
    pub alpha_b: f64,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        Self { kappa: 10.0, alpha: 1.0, alpha_b: 1.0 }
    }
}

/// `x1' = x2, x2' = u`, `u in [-1, 1]`; safe set `-x1 >= 0`; primary
/// controller `+1` (drives into the unsafe half plane), backup `-1`
/// (maximum braking) with backup set `{-x1 >= 0, -x2 >= 0}`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    params: DoubleIntegratorParams,
    alpha: ClassK,
    alpha_b: ClassK,
    bounds: InputBox,
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self::new(DoubleIntegratorParams::default()).expect("default parameters are valid")
    }
}

impl DoubleIntegrator {
    pub fn new(params: DoubleIntegratorParams) -> Result<Self> {
        if !(params.kappa.is_finite() && params.kappa > 0.0) {
            return Err(Error::invalid(format!("kappa must be > 0, got {}", params.kappa)));
        }
        Ok(Self {
            params,
            alpha: ClassK::linear(params.alpha)?,
            alpha_b: ClassK::linear(params.alpha_b)?,
            bounds: InputBox::from_slices(&[-1.0], &[1.0])?,
        })
    }

    pub fn params(&self) -> &DoubleIntegratorParams {
        &self.params
    }

    fn backup_values(x: &StateVec) -> [f64; 2] {
        [-x[0], -x[1]]
    }
}

impl ControlAffine for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn input_box(&self) -> &InputBox {
        &self.bounds
    }

    fn drift(&self, x: &StateVec) -> Result<StateVec> {
        Ok(DVector::from_vec(vec![x[1], 0.0]))
    }

    fn input_matrix(&self, _x: &StateVec) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]))
    }

    fn primary_control(&self, _x: &StateVec) -> ControlVec {
        DVector::from_element(1, 1.0)
    }

    fn backup_control(&self, _x: &StateVec) -> ControlVec {
        DVector::from_element(1, -1.0)
    }

    fn closed_loop_jacobian(&self, _x: &StateVec) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]))
    }

    fn name(&self) -> &str {
        "double_integrator"
    }
}

impl SafetySpec for DoubleIntegrator {
    fn h(&self, x: &StateVec) -> f64 {
        -x[0]
    }

    fn grad_h(&self, _x: &StateVec) -> StateVec {
        DVector::from_vec(vec![-1.0, 0.0])
    }

    fn h_b(&self, x: &StateVec) -> f64 {
        smooth_min(&Self::backup_values(x), self.params.kappa).0
    }

    fn grad_h_b(&self, x: &StateVec) -> StateVec {
        let (_, w) = smooth_min(&Self::backup_values(x), self.params.kappa);
        smooth_min_grad(&w, &[DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![0.0, -1.0])])
    }

    fn alpha(&self) -> ClassK {
        self.alpha
    }

    fn alpha_b(&self) -> ClassK {
        self.alpha_b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{eval_closed_loop, fd_gradient};
    use approx::assert_abs_diff_eq;

    #[test]
    fn closed_loop_examples() {
        let m = DoubleIntegrator::default();
        let v = eval_closed_loop(&m, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(v, DVector::from_vec(vec![1.0, -1.0]));
        let v = eval_closed_loop(&m, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(v, DVector::from_vec(vec![0.0, -1.0]));
    }

    #[test]
    fn backup_set_under_approximates_min() {
        for kappa in [1.0, 10.0, 100.0, 1000.0] {
            let m = DoubleIntegrator::new(DoubleIntegratorParams { kappa, ..Default::default() }).unwrap();
            for (a, b) in [(0.0f64, 0.0f64), (-1.0, 2.0), (3.0, -0.5), (0.2, 0.2001)] {
                let x = DVector::from_vec(vec![a, b]);
                let exact = (-a).min(-b);
                let hb = m.h_b(&x);
                assert!(hb <= exact);
                assert!(exact - hb <= 2f64.ln() / kappa + 1e-15);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = DoubleIntegrator::default();
        for (a, b) in [(0.1, -0.3), (-2.0, 0.5), (0.0, 0.0)] {
            let x = DVector::from_vec(vec![a, b]);
            let g = m.grad_h_b(&x);
            let fd = fd_gradient(|y| m.h_b(y), &x, 1e-6);
            assert_abs_diff_eq!(g, fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn backup_flow_stays_in_backup_set() {
        use crate::integrate::{integrate_flow, HorizonGrid};
        let m = DoubleIntegrator::default();
        let grid = HorizonGrid::new(5.0, 50, 0.01).unwrap();
        for (a, b) in [(0.0, 0.0), (-1.0, -0.5), (-0.01, 0.0)] {
            let bundle = integrate_flow(&m, &DVector::from_vec(vec![a, b]), &grid).unwrap();
            for p in &bundle.phi {
                assert!(-p[0] >= 0.0 && -p[1] >= 0.0);
            }
        }
    }
}
