//! Eight-state fixed-wing aircraft kinematics with a half-plane geofence.
//!
//! State layout: `[phi, theta, psi, p_N, p_E, H, P, N_z]` (roll, pitch, yaw
//! in rad; north/east position and altitude in m; roll rate in rad/s; normal
//! load factor in g). Inputs: commanded roll rate and load factor.
//!
//! The backup controller flies a coordinated turn at bank angle `phi*`.
//! With `phi* < 0` the turn is to the left; the turning radius is kept as a
//! positive length `rho` and the direction in `turn_sign`, so the orbit
//! geometry reads `center = p + turn_sign * rho * n(psi)`.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{smooth_min, smooth_min_grad, soft_saturate, soft_saturate_slope};
use crate::error::{Error, Result};
use crate::system::{ClassK, ControlAffine, ControlVec, InputBox, SafetySpec, StateVec};

pub const PHI: usize = 0;
pub const THETA: usize = 1;
pub const PSI: usize = 2;
pub const PN: usize = 3;
pub const PE: usize = 4;
pub const ALT: usize = 5;
pub const ROLL_RATE: usize = 6;
pub const NZ: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AircraftParams {
    /// True airspeed, m/s.
    pub v_t: f64,
    /// Gravitational acceleration, m/s^2.
    pub g_d: f64,
    /// Roll-mode time constant, s.
    pub tau_p: f64,
    /// Load-factor time constant, s.
    pub tau_z: f64,
    /// Backup bank angle, rad.
    pub phi_star: f64,
    /// Backup altitude, m.
    pub h_star: f64,
    /// A point on the geofence (north, east), m.
    pub geofence_point: [f64; 2],
    /// Unit normal pointing into the allowed airspace.
    pub geofence_normal: [f64; 2],
    pub k_phi: f64,
    pub k_p: f64,
    pub k_n: f64,
    pub k_h: f64,
    pub k_theta: f64,
    pub k_psi: f64,
    /// Backup-set band half-widths `c_1..c_5` and the orbit clearance `c_6`.
    pub c: [f64; 6],
    /// Smooth-min sharpness for the backup set.
    pub kappa: f64,
    /// Softplus saturation sharpness.
    pub beta: f64,
    /// Nominal pursuit setpoint (north, east), m.
    pub setpoint: [f64; 2],
    /// Maximum bank commanded by the nominal controller, rad.
    pub max_bank: f64,
    pub alpha: f64,
    pub alpha_b: f64,
}

impl Default for AircraftParams {
    fn default() -> Self {
        Self {
            v_t: 200.0,
            g_d: 9.81,
            tau_p: 1.0,
            tau_z: 1.0,
            phi_star: -FRAC_PI_4,
            h_star: 10_000.0,
            geofence_point: [8_000.0, 0.0],
            geofence_normal: [-1.0, 0.0],
            k_phi: 4.0,
            k_p: 2.0,
            k_n: 1.0,
            k_h: 0.01,
            k_theta: 8.0,
            k_psi: 1.0,
            c: [0.2, 0.1, 30.0, 0.2, 0.2, 200.0],
            kappa: 2000.0,
            beta: 20.0,
            setpoint: [40_000.0, -30_000.0],
            max_bank: FRAC_PI_4,
            alpha: 0.1,
            alpha_b: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Aircraft {
    p: AircraftParams,
    alpha: ClassK,
    alpha_b: ClassK,
    bounds: InputBox,
    rho: f64,
    turn_sign: f64,
    nz_star: f64,
}

impl Default for Aircraft {
    fn default() -> Self {
        Self::new(AircraftParams::default()).expect("default parameters are valid")
    }
}

/// `n(psi) = [-sin psi, cos psi]`.
#[inline]
pub fn heading_normal(psi: f64) -> [f64; 2] {
    [-psi.sin(), psi.cos()]
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

impl Aircraft {
    pub fn new(p: AircraftParams) -> Result<Self> {
        let positive = [
            ("v_t", p.v_t),
            ("g_d", p.g_d),
            ("tau_p", p.tau_p),
            ("tau_z", p.tau_z),
            ("k_phi", p.k_phi),
            ("k_p", p.k_p),
            ("k_n", p.k_n),
            ("k_h", p.k_h),
            ("k_theta", p.k_theta),
            ("k_psi", p.k_psi),
            ("kappa", p.kappa),
            ("beta", p.beta),
            ("max_bank", p.max_bank),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("aircraft parameter {name} must be > 0, got {v}")));
            }
        }
        for (i, ci) in p.c.iter().enumerate() {
            if !(ci.is_finite() && *ci > 0.0) {
                return Err(Error::invalid(format!("backup-set constant c{} must be > 0", i + 1)));
            }
        }
        if !(p.phi_star.is_finite() && p.phi_star != 0.0 && p.phi_star.abs() <= FRAC_PI_4) {
            return Err(Error::invalid(format!(
                "phi_star must be a nonzero angle in [-pi/4, pi/4], got {}",
                p.phi_star
            )));
        }
        if p.max_bank > FRAC_PI_2 {
            return Err(Error::invalid("max_bank must be below pi/2"));
        }
        let [nx, ny] = p.geofence_normal;
        if ((nx * nx + ny * ny).sqrt() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("geofence normal must have unit length"));
        }
        let tan_phi = p.phi_star.tan();
        Ok(Self {
            alpha: ClassK::linear(p.alpha)?,
            alpha_b: ClassK::linear(p.alpha_b)?,
            bounds: InputBox::from_slices(&[-FRAC_PI_2, -1.0], &[FRAC_PI_2, 4.0])?,
            rho: (p.v_t * p.v_t / (p.g_d * tan_phi)).abs(),
            turn_sign: tan_phi.signum(),
            nz_star: 1.0 / p.phi_star.cos(),
            p,
        })
    }

    pub fn params(&self) -> &AircraftParams {
        &self.p
    }

    /// Positive turning radius `|V_T^2 / (g_D tan phi*)|`.
    pub fn turn_radius(&self) -> f64 {
        self.rho
    }

    /// `-1` for a left (counter-clockwise seen from above) turn.
    pub fn turn_sign(&self) -> f64 {
        self.turn_sign
    }

    pub fn nz_star(&self) -> f64 {
        self.nz_star
    }

    /// Time for one full backup orbit.
    pub fn turn_period(&self) -> f64 {
        2.0 * PI * self.rho / self.p.v_t
    }

    /// Wings-level, constant-altitude trim state at position `p` and heading `psi`.
    pub fn trim_state(&self, p: [f64; 2], psi: f64) -> StateVec {
        DVector::from_vec(vec![0.0, 0.0, psi, p[0], p[1], self.p.h_star, 0.0, 1.0])
    }

    /// A state on the backup orbit manifold (the equality part of `C_B`).
    pub fn orbit_state(&self, p: [f64; 2], psi: f64) -> StateVec {
        DVector::from_vec(vec![self.p.phi_star, 0.0, psi, p[0], p[1], self.p.h_star, 0.0, self.nz_star])
    }

    fn check_pitch(x: &StateVec) -> Result<f64> {
        let c = x[THETA].cos();
        if c.abs() < 1e-6 {
            Err(Error::GimbalSingularity { cos_theta: c })
        } else {
            Ok(c)
        }
    }

    /// Drift vector field `f(x)`.
    pub fn f(&self, x: &StateVec) -> Result<StateVec> {
        let cth = Self::check_pitch(x)?;
        let k = self.p.g_d / self.p.v_t;
        let (sphi, cphi) = x[PHI].sin_cos();
        let sth = x[THETA].sin();
        let (spsi, cpsi) = x[PSI].sin_cos();
        let nz = x[NZ];
        let v = self.p.v_t;
        Ok(DVector::from_vec(vec![
            x[ROLL_RATE] + k * nz * sphi * sth / cth,
            k * (nz * cphi - cth),
            k * nz * sphi / cth,
            v * cth * cpsi,
            v * cth * spsi,
            v * sth,
            -x[ROLL_RATE] / self.p.tau_p,
            -nz / self.p.tau_z,
        ]))
    }

    /// Constant input matrix `g(x)`.
    pub fn g(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(8, 2);
        g[(ROLL_RATE, 0)] = 1.0 / self.p.tau_p;
        g[(NZ, 1)] = 1.0 / self.p.tau_z;
        g
    }

    /// Jacobian of the drift `f`.
    pub fn drift_jacobian(&self, x: &StateVec) -> Result<DMatrix<f64>> {
        let cth = Self::check_pitch(x)?;
        let k = self.p.g_d / self.p.v_t;
        let v = self.p.v_t;
        let (sphi, cphi) = x[PHI].sin_cos();
        let sth = x[THETA].sin();
        let tth = sth / cth;
        let (spsi, cpsi) = x[PSI].sin_cos();
        let nz = x[NZ];
        let mut j = DMatrix::zeros(8, 8);
        j[(PHI, PHI)] = k * nz * cphi * tth;
        j[(PHI, THETA)] = k * nz * sphi / (cth * cth);
        j[(PHI, ROLL_RATE)] = 1.0;
        j[(PHI, NZ)] = k * sphi * tth;
        j[(THETA, PHI)] = -k * nz * sphi;
        j[(THETA, THETA)] = k * sth;
        j[(THETA, NZ)] = k * cphi;
        j[(PSI, PHI)] = k * nz * cphi / cth;
        j[(PSI, THETA)] = k * nz * sphi * sth / (cth * cth);
        j[(PSI, NZ)] = k * sphi / cth;
        j[(PN, THETA)] = -v * sth * cpsi;
        j[(PN, PSI)] = -v * cth * spsi;
        j[(PE, THETA)] = -v * sth * spsi;
        j[(PE, PSI)] = v * cth * cpsi;
        j[(ALT, THETA)] = v * cth;
        j[(ROLL_RATE, ROLL_RATE)] = -1.0 / self.p.tau_p;
        j[(NZ, NZ)] = -1.0 / self.p.tau_z;
        Ok(j)
    }

    /// Unsaturated roll-rate and load-factor commands of the attitude/altitude
    /// hold law for a target bank angle.
    fn hold_commands(&self, x: &StateVec, bank: f64) -> [f64; 2] {
        let p = &self.p;
        let nz_target = 1.0 / bank.cos();
        [
            x[ROLL_RATE] + p.tau_p * (p.k_phi * (bank - x[PHI]) - p.k_p * x[ROLL_RATE]),
            x[NZ] + p.tau_z * (p.k_n * (nz_target - x[NZ]) + p.k_h * (p.h_star - x[ALT]) - p.k_theta * x[THETA]),
        ]
    }

    fn saturate(&self, v: [f64; 2]) -> ControlVec {
        let lo = self.bounds.lower();
        let hi = self.bounds.upper();
        DVector::from_fn(2, |j, _| soft_saturate(v[j], lo[j], hi[j], self.p.beta))
    }

    /// Coordinated-turn backup law, softly saturated onto the input box.
    pub fn backup_command(&self, x: &StateVec) -> ControlVec {
        self.saturate(self.hold_commands(x, self.p.phi_star))
    }

    /// Jacobian of [`Aircraft::backup_command`].
    pub fn backup_command_jacobian(&self, x: &StateVec) -> DMatrix<f64> {
        let p = &self.p;
        let v = self.hold_commands(x, p.phi_star);
        let lo = self.bounds.lower();
        let hi = self.bounds.upper();
        let s0 = soft_saturate_slope(v[0], lo[0], hi[0], p.beta);
        let s1 = soft_saturate_slope(v[1], lo[1], hi[1], p.beta);
        let mut j = DMatrix::zeros(2, 8);
        j[(0, PHI)] = -s0 * p.tau_p * p.k_phi;
        j[(0, ROLL_RATE)] = s0 * (1.0 - p.tau_p * p.k_p);
        j[(1, NZ)] = s1 * (1.0 - p.tau_z * p.k_n);
        j[(1, ALT)] = -s1 * p.tau_z * p.k_h;
        j[(1, THETA)] = -s1 * p.tau_z * p.k_theta;
        j
    }

    /// Pursuit heading toward the setpoint (four-quadrant).
    pub fn pursuit_heading(&self, x: &StateVec) -> f64 {
        (self.p.setpoint[1] - x[PE]).atan2(self.p.setpoint[0] - x[PN])
    }

    /// Bank angle requested by the nominal pursuit law.
    pub fn pursuit_bank(&self, x: &StateVec) -> f64 {
        let err = wrap_angle(self.pursuit_heading(x) - x[PSI]);
        (self.p.k_psi * err * self.p.v_t / self.p.g_d).clamp(-self.p.max_bank, self.p.max_bank)
    }

    /// Nominal controller: the hold law with the pursuit bank angle.
    pub fn nominal_command(&self, x: &StateVec) -> ControlVec {
        self.saturate(self.hold_commands(x, self.pursuit_bank(x)))
    }

    /// Geofence barrier `h(x) = n_g . (p - p_g)`.
    pub fn geofence_h(&self, x: &StateVec) -> f64 {
        let [gn, ge] = self.p.geofence_normal;
        gn * (x[PN] - self.p.geofence_point[0]) + ge * (x[PE] - self.p.geofence_point[1])
    }

    /// Clearance of the backup orbit from the geofence minus `c_6`.
    pub fn h6(&self, x: &StateVec) -> f64 {
        let [gn, ge] = self.p.geofence_normal;
        let [nn, ne] = heading_normal(x[PSI]);
        self.geofence_h(x) + self.rho * (self.turn_sign * (gn * nn + ge * ne) - 1.0) - self.p.c[5]
    }

    /// `h_1 .. h_6` in order.
    pub fn backup_components(&self, x: &StateVec) -> [f64; 6] {
        let p = &self.p;
        let c = &p.c;
        [
            c[0] * c[0] - (p.phi_star - x[PHI]).powi(2),
            c[1] * c[1] - x[THETA].powi(2),
            c[2] * c[2] - (p.h_star - x[ALT]).powi(2),
            c[3] * c[3] - x[ROLL_RATE].powi(2),
            c[4] * c[4] - (self.nz_star - x[NZ]).powi(2),
            self.h6(x),
        ]
    }

    fn backup_component_grads(&self, x: &StateVec) -> Vec<DVector<f64>> {
        let p = &self.p;
        let mut grads = vec![DVector::zeros(8); 6];
        grads[0][PHI] = 2.0 * (p.phi_star - x[PHI]);
        grads[1][THETA] = -2.0 * x[THETA];
        grads[2][ALT] = 2.0 * (p.h_star - x[ALT]);
        grads[3][ROLL_RATE] = -2.0 * x[ROLL_RATE];
        grads[4][NZ] = 2.0 * (self.nz_star - x[NZ]);
        let [gn, ge] = p.geofence_normal;
        let (s, c) = x[PSI].sin_cos();
        grads[5][PN] = gn;
        grads[5][PE] = ge;
        // d/dpsi n(psi) = [-cos psi, -sin psi]
        grads[5][PSI] = self.rho * self.turn_sign * (gn * -c + ge * -s);
        grads
    }

    /// Smooth under-approximation of `min(h_1, .., h_6)`.
    pub fn backup_h(&self, x: &StateVec) -> f64 {
        smooth_min(&self.backup_components(x), self.p.kappa).0
    }

    /// Closed-form backup-flow position for a state on the orbit manifold.
    pub fn orbit_position(&self, x: &StateVec, tau: f64) -> [f64; 2] {
        let psi_b = x[PSI] + self.turn_sign * self.p.v_t / self.rho * tau;
        let n0 = heading_normal(x[PSI]);
        let n1 = heading_normal(psi_b);
        let r = self.turn_sign * self.rho;
        [x[PN] + r * (n0[0] - n1[0]), x[PE] + r * (n0[1] - n1[1])]
    }
}

impl ControlAffine for Aircraft {
    fn state_dim(&self) -> usize {
        8
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn input_box(&self) -> &InputBox {
        &self.bounds
    }

    fn drift(&self, x: &StateVec) -> Result<StateVec> {
        self.f(x)
    }

    fn input_matrix(&self, _x: &StateVec) -> Result<DMatrix<f64>> {
        Ok(self.g())
    }

    fn primary_control(&self, x: &StateVec) -> ControlVec {
        self.nominal_command(x)
    }

    fn backup_control(&self, x: &StateVec) -> ControlVec {
        self.backup_command(x)
    }

    fn closed_loop_jacobian(&self, x: &StateVec) -> Result<DMatrix<f64>> {
        Ok(self.drift_jacobian(x)? + self.g() * self.backup_command_jacobian(x))
    }

    fn name(&self) -> &str {
        "aircraft"
    }
}

impl SafetySpec for Aircraft {
    fn h(&self, x: &StateVec) -> f64 {
        self.geofence_h(x)
    }

    fn grad_h(&self, _x: &StateVec) -> StateVec {
        let mut g = DVector::zeros(8);
        g[PN] = self.p.geofence_normal[0];
        g[PE] = self.p.geofence_normal[1];
        g
    }

    fn h_b(&self, x: &StateVec) -> f64 {
        self.backup_h(x)
    }

    fn grad_h_b(&self, x: &StateVec) -> StateVec {
        let (_, w) = smooth_min(&self.backup_components(x), self.p.kappa);
        smooth_min_grad(&w, &self.backup_component_grads(x))
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
    use crate::system::{eval_closed_loop, fd_gradient, fd_jacobian};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut impl Rng, ac: &Aircraft) -> StateVec {
        DVector::from_vec(vec![
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.4..0.4),
            rng.random_range(-PI..PI),
            rng.random_range(-5000.0..7000.0),
            rng.random_range(-5000.0..5000.0),
            ac.params().h_star + rng.random_range(-200.0..200.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..3.0),
        ])
    }

    #[test]
    fn trim_state_drift() {
        let ac = Aircraft::default();
        let x = ac.trim_state([0.0, 0.0], 0.0);
        let f = ac.f(&x).unwrap();
        // Hand evaluation at wings-level trim heading north.
        assert_eq!(f[PHI], 0.0);
        assert_eq!(f[THETA], 0.0);
        assert_eq!(f[PSI], 0.0);
        assert_eq!(f[PN], 200.0);
        assert_eq!(f[PE], 0.0);
        assert_eq!(f[ALT], 0.0);
        assert_eq!(f[ROLL_RATE], 0.0);
        assert_eq!(f[NZ], -1.0);
    }

    #[test]
    fn closed_loop_matches_hand_evaluation() {
        let ac = Aircraft::default();
        let x = ac.trim_state([100.0, -50.0], 0.3);
        let u = ac.backup_command(&x);
        let v = eval_closed_loop(&ac, &x).unwrap();
        // Only P and N_z rows see the input.
        let k = 9.81 / 200.0;
        assert_abs_diff_eq!(v[PHI], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[THETA], k * (1.0 - 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v[PN], 200.0 * 0.3f64.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(v[PE], 200.0 * 0.3f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(v[ROLL_RATE], -0.0 + u[0], epsilon = 1e-15);
        assert_abs_diff_eq!(v[NZ], -1.0 + u[1], epsilon = 1e-15);
        // Unsaturated roll command is 4 * (-pi/4) = -pi, beyond the box.
        assert!(u[0] > -FRAC_PI_2 && u[0] < -FRAC_PI_2 + 1e-6);
    }

    #[test]
    fn input_matrix_rows() {
        let g = Aircraft::default().g();
        for r in 0..8 {
            for c in 0..2 {
                let expected = match (r, c) {
                    (ROLL_RATE, 0) | (NZ, 1) => 1.0,
                    _ => 0.0,
                };
                assert_eq!(g[(r, c)], expected);
            }
        }
    }

    #[test]
    fn gimbal_singularity() {
        let ac = Aircraft::default();
        let mut x = ac.trim_state([0.0, 0.0], 0.0);
        x[THETA] = FRAC_PI_2;
        assert!(matches!(ac.f(&x), Err(Error::GimbalSingularity { .. })));
    }

    #[test]
    fn orbit_states_are_closed_loop_equilibria_in_attitude() {
        let ac = Aircraft::default();
        let x = ac.orbit_state([0.0, 0.0], 1.0);
        let u = ac.backup_command(&x);
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], ac.nz_star(), epsilon = 1e-12);
        let v = eval_closed_loop(&ac, &x).unwrap();
        for idx in [PHI, THETA, ALT, ROLL_RATE, NZ] {
            assert_abs_diff_eq!(v[idx], 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(v[PSI], -9.81 / 200.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let ac = Aircraft::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = random_state(&mut rng, &ac);
            let jac = ac.closed_loop_jacobian(&x).unwrap();
            let fd = fd_jacobian(|y| eval_closed_loop(&ac, y), &x, 1e-6).unwrap();
            let err = (&jac - &fd).amax();
            assert!(err <= 1e-4 * (1.0 + jac.amax()), "err {err}");
        }
    }

    #[test]
    fn barrier_gradients_match_finite_differences() {
        let ac = Aircraft::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = random_state(&mut rng, &ac);
            let g = ac.grad_h(&x);
            let fd = fd_gradient(|y| ac.h(y), &x, 1e-4);
            assert!((&g - &fd).norm() <= 1e-4 * (1.0 + g.norm()));
            // Components are polynomial/trig, so check them one by one at a
            // sharp smoothing where the soft-min is dominated by a single term.
            let g = ac.grad_h_b(&x);
            let fd = fd_gradient(|y| ac.h_b(y), &x, 1e-6);
            assert!((&g - &fd).norm() <= 1e-4 * (1.0 + g.norm()), "{g} vs {fd}");
        }
    }

    #[test]
    fn backup_set_inside_safe_set() {
        let ac = Aircraft::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x = random_state(&mut rng, &ac);
            let comps = ac.backup_components(&x);
            let hb = ac.h_b(&x);
            assert!(comps.iter().all(|c| hb <= *c));
            assert!(ac.h(&x) >= ac.h6(&x));
        }
    }

    #[test]
    fn geofence_plane_is_zero() {
        let ac = Aircraft::default();
        let x = ac.trim_state([8000.0, 1234.0], 0.7);
        assert_eq!(ac.h(&x), 0.0);
    }

    #[test]
    fn pursuit_heading_quadrants() {
        let ac = Aircraft::new(AircraftParams { setpoint: [10_000.0, 0.0], ..Default::default() }).unwrap();
        let x = ac.trim_state([0.0, 0.0], 0.0);
        assert_eq!(ac.pursuit_heading(&x), 0.0);
        assert_eq!(ac.pursuit_bank(&x), 0.0);
        let u = ac.nominal_command(&x);
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-15);

        let ac = Aircraft::new(AircraftParams { setpoint: [0.0, 10_000.0], ..Default::default() }).unwrap();
        assert_abs_diff_eq!(ac.pursuit_heading(&x), FRAC_PI_2, epsilon = 1e-15);
        let ac = Aircraft::new(AircraftParams { setpoint: [-10_000.0, -1.0], ..Default::default() }).unwrap();
        assert!(ac.pursuit_heading(&x) < -3.0);
    }

    #[test]
    fn orbit_closed_form_endpoints() {
        let ac = Aircraft::default();
        let x = ac.orbit_state([10.0, -20.0], 0.4);
        let p0 = ac.orbit_position(&x, 0.0);
        assert_eq!(p0, [10.0, -20.0]);
        let p1 = ac.orbit_position(&x, ac.turn_period());
        assert_abs_diff_eq!(p1[0], 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p1[1], -20.0, epsilon = 1e-9);
    }

    #[test]
    fn saturated_backup_jacobian_is_continuous() {
        let ac = Aircraft::default();
        // Sweep the roll error through the saturation knee of channel 0.
        let mut prev: Option<f64> = None;
        for k in 0..=400 {
            let mut x = ac.orbit_state([0.0, 0.0], 0.0);
            x[PHI] = ac.params().phi_star + 0.8 * (k as f64 / 400.0 - 0.5);
            let slope = ac.backup_command_jacobian(&x)[(0, PHI)];
            let fd = fd_jacobian(|y| Ok(ac.backup_command(y)), &x, 1e-7).unwrap()[(0, PHI)];
            assert_abs_diff_eq!(slope, fd, epsilon = 1e-5);
            if let Some(p) = prev {
                assert!((slope - p).abs() < 0.2, "jump at step {k}");
            }
            prev = Some(slope);
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 7.0] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI);
            assert_abs_diff_eq!(w.sin(), a.sin(), epsilon = 1e-12);
        }
    }
}
