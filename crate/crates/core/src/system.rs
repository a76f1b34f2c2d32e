//! Shared domain types: state and input vectors, input boxes, class-K
//! functions and the plant/safety interfaces every controller works against.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plant state `x` in R^n. Units are model specific.
pub type StateVec = DVector<f64>;
/// Control input `u` in R^m.
pub type ControlVec = DVector<f64>;

/// Axis-aligned input set `U = [lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    lower: ControlVec,
    upper: ControlVec,
}

impl InputBox {
    pub fn new(lower: ControlVec, upper: ControlVec) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid(format!(
                "input box bounds have mismatched dimensions {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!(
                    "input box channel {j}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &ControlVec {
        &self.lower
    }

    pub fn upper(&self) -> &ControlVec {
        &self.upper
    }

    /// Closed, componentwise membership test (no tolerance).
    pub fn contains(&self, u: &ControlVec) -> bool {
        u.len() == self.dim()
            && u.iter().zip(self.lower.iter().zip(self.upper.iter())).all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Componentwise clamp of `u` into the box.
    pub fn project(&self, u: &ControlVec) -> ControlVec {
        debug_assert_eq!(u.len(), self.dim());
        DVector::from_iterator(
            u.len(),
            u.iter().zip(self.lower.iter().zip(self.upper.iter())).map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }
}

/// Free-function form of [`InputBox::project`].
pub fn box_project(bounds: &InputBox, u: &ControlVec) -> ControlVec {
    bounds.project(u)
}

/// Linear extended class-K function `alpha(r) = gain * r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassK {
    gain: f64,
}

impl ClassK {
    pub fn linear(gain: f64) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::invalid(format!("class-K gain must be > 0, got {gain}")));
        }
        Ok(Self { gain })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        self.gain * r
    }
}

/// `alpha(r) = gain * r`, extended linearly to negative arguments.
#[inline]
pub fn alpha_eval(gain: f64, r: f64) -> f64 {
    debug_assert!(gain > 0.0);
    gain * r
}

/// Control-affine dynamics bundled with the primary (nominal) and backup
/// feedback laws used by the safety controllers.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input_box(&self) -> &InputBox;

    /// Drift term `f(x)`.
    fn drift(&self, x: &StateVec) -> Result<StateVec>;
    /// Input matrix `g(x)`, `n x m`.
    fn input_matrix(&self, x: &StateVec) -> Result<DMatrix<f64>>;

    /// Primary controller `k_p(x)`; must return a point of the input box.
    fn primary_control(&self, x: &StateVec) -> ControlVec;
    /// Backup controller `k_b(x)`; smooth, and inside the input box.
    fn backup_control(&self, x: &StateVec) -> ControlVec;

    /// Jacobian `F_cl(x)` of the closed-loop backup vector field
    /// `f_cl(x) = f(x) + g(x) k_b(x)`.
    fn closed_loop_jacobian(&self, x: &StateVec) -> Result<DMatrix<f64>>;

    fn name(&self) -> &str;
}

/// Safe set `{h >= 0}`, backup set `{h_b >= 0}` and their class-K gains.
pub trait SafetySpec: Send + Sync {
    fn h(&self, x: &StateVec) -> f64;
    fn grad_h(&self, x: &StateVec) -> StateVec;
    fn h_b(&self, x: &StateVec) -> f64;
    fn grad_h_b(&self, x: &StateVec) -> StateVec;
    fn alpha(&self) -> ClassK;
    fn alpha_b(&self) -> ClassK;
}

/// A plant together with its safety specification.
pub trait Scenario: ControlAffine + SafetySpec {}

impl<T: ControlAffine + SafetySpec + ?Sized> Scenario for T {}

pub(crate) fn ensure_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|e| e.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is not finite: {v:?}")))
    }
}

/// `f(x) + g(x) u`.
pub fn eval_dynamics<M: ControlAffine + ?Sized>(model: &M, x: &StateVec, u: &ControlVec) -> Result<StateVec> {
    let xdot = model.drift(x)? + model.input_matrix(x)? * u;
    ensure_finite(&xdot, "state derivative")?;
    Ok(xdot)
}

/// Closed-loop backup vector field `f_cl(x) = f(x) + g(x) k_b(x)`.
pub fn eval_closed_loop<M: ControlAffine + ?Sized>(model: &M, x: &StateVec) -> Result<StateVec> {
    ensure_finite(x, "state")?;
    let u = model.backup_control(x);
    eval_dynamics(model, x, &u)
}

/// Primary closed-loop vector field `f_p(x) = f(x) + g(x) k_p(x)`.
pub fn eval_primary_loop<M: ControlAffine + ?Sized>(model: &M, x: &StateVec) -> Result<StateVec> {
    ensure_finite(x, "state")?;
    let u = model.primary_control(x);
    eval_dynamics(model, x, &u)
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(fun: impl Fn(&StateVec) -> f64, x: &StateVec, step: f64) -> StateVec {
    let mut grad = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = fun(&probe);
        probe[i] = orig - step;
        let down = fun(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Central finite-difference Jacobian of a vector function; column `j`
/// holds the derivative with respect to `x[j]`.
pub fn fd_jacobian(fun: impl Fn(&StateVec) -> Result<StateVec>, x: &StateVec, step: f64) -> Result<DMatrix<f64>> {
    let base = fun(x)?;
    let mut jac = DMatrix::zeros(base.len(), x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let orig = probe[j];
        probe[j] = orig + step;
        let up = fun(&probe)?;
        probe[j] = orig - step;
        let down = fun(&probe)?;
        probe[j] = orig;
        jac.set_column(j, &((up - down) / (2.0 * step)));
    }
    Ok(jac)
}
