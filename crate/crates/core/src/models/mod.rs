//! Reference plants: the double integrator braking example and the
//! fixed-wing aircraft geofence scenario.

mod aircraft;
mod double_integrator;

pub use aircraft::{Aircraft, AircraftParams};
pub use double_integrator::{DoubleIntegrator, DoubleIntegratorParams};

use nalgebra::DVector;

/// Log-sum-exp under-approximation of `min_i values[i]`:
/// `-(1/kappa) ln sum_i exp(-kappa values[i])`.
///
/// Returns the value and the weights `d value / d values[i]`, which are
/// non-negative and sum to one.
pub fn smooth_min(values: &[f64], kappa: f64) -> (f64, Vec<f64>) {
    debug_assert!(kappa > 0.0 && !values.is_empty());
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|v| (-kappa * (v - lo)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let value = lo - sum.ln() / kappa;
    let weights = exps.iter().map(|e| e / sum).collect();
    (value, weights)
}

/// Gradient of a smooth minimum given the gradients of its arguments.
pub(crate) fn smooth_min_grad(weights: &[f64], grads: &[DVector<f64>]) -> DVector<f64> {
    let mut g = DVector::zeros(grads[0].len());
    for (w, gi) in weights.iter().zip(grads) {
        g.axpy(*w, gi, 1.0);
    }
    g
}

/// Numerically stable `ln(1 + exp(beta z)) / beta`.
#[inline]
pub(crate) fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    if bz > 0.0 {
        z + (-bz).exp().ln_1p() / beta
    } else {
        bz.exp().ln_1p() / beta
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth two-sided saturation of `v` onto `(lower, upper)`:
/// `lower + softplus(v - lower) - softplus(v - upper)`, clamped against
/// rounding past the bounds.
#[inline]
pub fn soft_saturate(v: f64, lower: f64, upper: f64, beta: f64) -> f64 {
    (lower + softplus(v - lower, beta) - softplus(v - upper, beta)).clamp(lower, upper)
}

/// Derivative of [`soft_saturate`] with respect to `v`.
#[inline]
pub fn soft_saturate_slope(v: f64, lower: f64, upper: f64, beta: f64) -> f64 {
    logistic(beta * (v - lower)) - logistic(beta * (v - upper))
}
