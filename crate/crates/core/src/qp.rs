//! The scalar `lambda(a, b)` map and a dense active-set solver for
//!
//! ```text
//!     minimize    1/2 ||u - target||^2
//!     subject to  c_k . u + d_k >= 0      (general rows)
//!                 lower <= u <= upper     (input box)
//! ```
//!
//! The solver follows the dual method of Goldfarb and Idnani specialised to
//! an identity Hessian: it starts from the unconstrained minimiser and adds
//! the most violated constraint at each major iteration. A constraint that
//! cannot be reached by any primal or dual step certifies infeasibility.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::system::{ControlVec, InputBox};

/// `lambda(a, b) = 0` if `b <= 0`, else `max(0, -a / b)`.
#[inline]
pub fn lambda_relu(a: f64, b: f64) -> f64 {
    if b <= 0.0 {
        0.0
    } else {
        (-a / b).max(0.0)
    }
}

/// One inequality `c . u + d >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub c: DVector<f64>,
    pub d: f64,
}

impl LinearRow {
    pub fn new(c: DVector<f64>, d: f64) -> Self {
        Self { c, d }
    }

    pub fn slack(&self, u: &DVector<f64>) -> f64 {
        self.c.dot(u) + self.d
    }
}

/// General rows plus the input box.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraintSet {
    pub rows: Vec<LinearRow>,
    pub bounds: InputBox,
}

impl LinearConstraintSet {
    pub fn new(rows: Vec<LinearRow>, bounds: InputBox) -> Self {
        Self { rows, bounds }
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Total number of constraints including the `2m` box faces.
    pub fn len_with_box(&self) -> usize {
        self.rows.len() + 2 * self.dim()
    }

    /// Constraint `k` in the unified numbering: general rows first, then
    /// lower bounds `u_j >= lower_j`, then upper bounds `u_j <= upper_j`.
    pub fn constraint(&self, k: usize) -> LinearRow {
        let m = self.dim();
        let r = self.rows.len();
        if k < r {
            self.rows[k].clone()
        } else if k < r + m {
            let j = k - r;
            LinearRow::new(DVector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 }), -self.bounds.lower()[j])
        } else {
            let j = k - r - m;
            LinearRow::new(DVector::from_fn(m, |i, _| if i == j { -1.0 } else { 0.0 }), self.bounds.upper()[j])
        }
    }

    pub fn all_constraints(&self) -> Vec<LinearRow> {
        (0..self.len_with_box()).map(|k| self.constraint(k)).collect()
    }

    /// Smallest slack over all constraints (negative means violated).
    pub fn min_slack(&self, u: &DVector<f64>) -> f64 {
        (0..self.len_with_box()).map(|k| self.constraint(k).slack(u)).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u_star: ControlVec,
    /// Active constraints in the unified numbering of
    /// [`LinearConstraintSet::constraint`].
    pub active_set: Vec<usize>,
    /// Multipliers for every constraint (zero when inactive).
    pub multipliers: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

/// KKT residuals of a candidate QP solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpResiduals {
    /// `min_k slack_k` (should be >= 0).
    pub min_slack: f64,
    /// `|| u - target - sum_k lambda_k c_k ||_inf`.
    pub stationarity: f64,
    /// `min_k lambda_k` (should be >= 0).
    pub min_multiplier: f64,
    /// `max_k |lambda_k * slack_k|`.
    pub complementarity: f64,
}

pub fn qp_residuals(target: &ControlVec, constraints: &LinearConstraintSet, sol: &QpSolution) -> QpResiduals {
    let mut grad = &sol.u_star - target;
    let mut min_slack = f64::INFINITY;
    let mut min_mult = f64::INFINITY;
    let mut comp: f64 = 0.0;
    for (k, lam) in sol.multipliers.iter().enumerate() {
        let row = constraints.constraint(k);
        let s = row.slack(&sol.u_star);
        min_slack = min_slack.min(s);
        min_mult = min_mult.min(*lam);
        comp = comp.max((lam * s).abs());
        grad -= &row.c * *lam;
    }
    QpResiduals { min_slack, stationarity: grad.amax(), min_multiplier: min_mult, complementarity: comp }
}

const ZERO_ROW: f64 = 1e-14;

/// Solve the box-constrained least-distance QP. `constraints.dim()` must be
/// at most 8.
pub fn solve_box_qp(target: &ControlVec, constraints: &LinearConstraintSet) -> QpSolution {
    let m = constraints.dim();
    assert_eq!(target.len(), m, "target dimension does not match constraint set");
    assert!(m <= 8, "solve_box_qp is meant for m <= 8");

    let all = constraints.all_constraints();
    let total = all.len();
    let norms: Vec<f64> = all.iter().map(|r| r.c.norm()).collect();
    let max_iter = 100 * m.max(1);

    let mut u = target.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let mut iterations = 0;

    let finish = |u: DVector<f64>, active: Vec<usize>, lam: Vec<f64>, status, iterations| {
        let mut multipliers = vec![0.0; total];
        for (k, l) in active.iter().zip(lam.iter()) {
            multipliers[*k] = l.max(0.0);
        }
        let u_star = if status == QpStatus::Optimal { constraints.bounds.project(&u) } else { u };
        QpSolution { u_star, active_set: active, multipliers, status, iterations }
    };

    // Rows with no dependence on u are either vacuous or contradictory.
    for (k, row) in all.iter().enumerate() {
        if norms[k] <= ZERO_ROW * (1.0 + row.d.abs()) && row.d < -1e-12 {
            return finish(u, active, lam, QpStatus::Infeasible, 0);
        }
    }

    loop {
        // Most violated constraint, measured as signed distance.
        let mut worst: Option<(usize, f64)> = None;
        for (k, row) in all.iter().enumerate() {
            if active.contains(&k) || norms[k] <= ZERO_ROW * (1.0 + row.d.abs()) {
                continue;
            }
            let dist = row.slack(&u) / norms[k];
            let tol = 1e-12 * (1.0 + row.d.abs() / norms[k]);
            if dist < -tol && worst.is_none_or(|(_, w)| dist < w) {
                worst = Some((k, dist));
            }
        }
        let Some((p, _)) = worst else {
            return finish(u, active, lam, QpStatus::Optimal, iterations);
        };

        let np = &all[p].c;
        let mut lam_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return finish(u, active, lam, QpStatus::MaxIterations, iterations);
            }

            let (z, r) = step_directions(&all, &active, np);
            let zz = z.dot(np);

            // Largest dual step keeping the active multipliers non-negative.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (idx, rj) in r.iter().enumerate() {
                if *rj > 1e-14 {
                    let ratio = lam[idx] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(idx);
                    }
                }
            }

            if zz <= 1e-14 * norms[p] * norms[p] {
                // No primal direction left: only a partial dual step.
                let Some(l) = drop else {
                    return finish(u, active, lam, QpStatus::Infeasible, iterations);
                };
                for (lj, rj) in lam.iter_mut().zip(r.iter()) {
                    *lj -= t1 * rj;
                }
                lam_p += t1;
                active.remove(l);
                lam.remove(l);
                continue;
            }

            let slack = all[p].slack(&u);
            let t2 = (-slack / zz).max(0.0);
            let t = t1.min(t2);
            u += &z * t;
            for (lj, rj) in lam.iter_mut().zip(r.iter()) {
                *lj -= t * rj;
            }
            lam_p += t;

            if t2 <= t1 {
                active.push(p);
                lam.push(lam_p);
                break;
            }
            let l = drop.expect("t1 finite implies a blocking index");
            active.remove(l);
            lam.remove(l);
        }
    }
}

/// Primal direction `z = (I - N (N^T N)^-1 N^T) n_p` and dual direction
/// `r = (N^T N)^-1 N^T n_p` for the active normals `N`.
fn step_directions(all: &[LinearRow], active: &[usize], np: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (np.clone(), DVector::zeros(0));
    }
    let m = np.len();
    let q = active.len();
    let n_mat = DMatrix::from_fn(m, q, |i, j| all[active[j]].c[i]);
    let gram = n_mat.transpose() * &n_mat;
    let rhs = n_mat.transpose() * np;
    let r = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.pseudo_inverse(1e-13).map(|pinv| pinv * &rhs).unwrap_or_else(|_| DVector::zeros(q)),
    };
    let z = np - &n_mat * &r;
    (z, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box(m: usize) -> InputBox {
        InputBox::new(DVector::from_element(m, -1.0), DVector::from_element(m, 1.0)).unwrap()
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_relu(-1.0, 2.0), 0.5);
        assert_eq!(lambda_relu(3.0, 2.0), 0.0);
        assert_eq!(lambda_relu(-1.0, -2.0), 0.0);
        assert_eq!(lambda_relu(-1.0, 0.0), 0.0);
    }

    #[test]
    fn interior_target_is_returned() {
        let cs = LinearConstraintSet::new(vec![LinearRow::new(DVector::from_vec(vec![1.0, 1.0]), 5.0)], unit_box(2));
        let t = DVector::from_vec(vec![0.2, -0.3]);
        let sol = solve_box_qp(&t, &cs);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(sol.u_star, t);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn scalar_interval_projection() {
        let cs = LinearConstraintSet::new(vec![LinearRow::new(DVector::from_element(1, 1.0), -0.3)], unit_box(1));
        let sol = solve_box_qp(&DVector::from_element(1, -0.5), &cs);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.u_star[0], 0.3, epsilon = 1e-15);
        assert_eq!(sol.active_set, vec![0]);
        let res = qp_residuals(&DVector::from_element(1, -0.5), &cs, &sol);
        assert!(res.stationarity < 1e-12);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        // u >= 0.5 and u <= 0.2
        let cs = LinearConstraintSet::new(
            vec![
                LinearRow::new(DVector::from_element(1, 1.0), -0.5),
                LinearRow::new(DVector::from_element(1, -1.0), 0.2),
            ],
            unit_box(1),
        );
        let sol = solve_box_qp(&DVector::from_element(1, 0.0), &cs);
        assert_eq!(sol.status, QpStatus::Infeasible);

        // Row beyond the box.
        let cs = LinearConstraintSet::new(vec![LinearRow::new(DVector::from_element(1, 1.0), -2.0)], unit_box(1));
        assert_eq!(solve_box_qp(&DVector::from_element(1, 0.0), &cs).status, QpStatus::Infeasible);

        // Input-independent row with negative offset.
        let cs = LinearConstraintSet::new(vec![LinearRow::new(DVector::from_element(1, 0.0), -1.0)], unit_box(1));
        assert_eq!(solve_box_qp(&DVector::from_element(1, 0.0), &cs).status, QpStatus::Infeasible);
    }

    /// Closed-form projection onto `[lo, hi] ∩ {c u + d >= 0 for all rows}`.
    fn interval_oracle(t: f64, rows: &[(f64, f64)]) -> Option<f64> {
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        for &(c, d) in rows {
            if c > 0.0 {
                lo = lo.max(-d / c);
            } else if c < 0.0 {
                hi = hi.min(-d / c);
            } else if d < 0.0 {
                return None;
            }
        }
        (lo <= hi).then(|| t.clamp(lo, hi))
    }

    #[test]
    fn scalar_matches_interval_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut feasible = 0;
        for _ in 0..10_000 {
            let t = rng.random_range(-2.0..2.0);
            let nrows = rng.random_range(1..6);
            let rows: Vec<(f64, f64)> =
                (0..nrows).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5))).collect();
            let cs = LinearConstraintSet::new(
                rows.iter().map(|&(c, d)| LinearRow::new(DVector::from_element(1, c), d)).collect(),
                unit_box(1),
            );
            let sol = solve_box_qp(&DVector::from_element(1, t), &cs);
            match interval_oracle(t, &rows) {
                Some(u) => {
                    feasible += 1;
                    assert_eq!(sol.status, QpStatus::Optimal, "rows {rows:?} t {t}");
                    assert_abs_diff_eq!(sol.u_star[0], u, epsilon = 1e-12);
                }
                None => assert_eq!(sol.status, QpStatus::Infeasible, "rows {rows:?}"),
            }
        }
        assert!(feasible > 1000);
    }

    #[test]
    fn kkt_residuals_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let m = rng.random_range(1..=4);
            let anchor = DVector::from_fn(m, |_, _| rng.random_range(-0.9..0.9));
            let rows: Vec<LinearRow> = (0..rng.random_range(1..12))
                .map(|_| {
                    let c = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                    let margin = rng.random_range(0.0..0.5);
                    let d = -c.dot(&anchor) + margin;
                    LinearRow::new(c, d)
                })
                .collect();
            let cs = LinearConstraintSet::new(rows, unit_box(m));
            let t = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
            let sol = solve_box_qp(&t, &cs);
            assert_eq!(sol.status, QpStatus::Optimal);
            let res = qp_residuals(&t, &cs, &sol);
            assert!(res.min_slack >= -1e-9, "{res:?}");
            assert!(res.stationarity <= 1e-8, "{res:?}");
            assert!(res.min_multiplier >= -1e-10, "{res:?}");
            assert!(res.complementarity <= 1e-8, "{res:?}");
            assert!(cs.bounds.contains(&sol.u_star));
        }
    }
}
