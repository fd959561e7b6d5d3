//! Planar 2-link reacher.
//!
//! Torque-controlled double pendulum in the horizontal plane (no gravity),
//! integrated with semi-implicit Euler. The state is
//! `[q1, q2, dq1, dq2, tx, ty]` — the target coordinates ride along as
//! constant state so a single stationary policy can generalize across
//! targets, which is what the distillation layer needs.
//!
//! Cost: `l(ee(q) - target)` with `alpha = 0, beta = 1` (smoothed distance)
//! plus a torque penalty several orders of magnitude smaller.

use super::generic_loss::GenericLoss;
use super::{CostTerms, Environment};
use crate::error::{PilqrError, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReacherParams {
    pub link_mass: [f64; 2],
    pub link_length: [f64; 2],
    /// Viscous joint damping.
    pub damping: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Weight of the torque penalty `w_u ||u||^2`.
    pub torque_penalty: f64,
    pub process_noise_std: f64,
}

impl Default for ReacherParams {
    fn default() -> Self {
        ReacherParams {
            link_mass: [1.0, 1.0],
            link_length: [1.0, 1.0],
            damping: 0.5,
            dt: 0.05,
            horizon: 100,
            torque_penalty: 1e-4,
            process_noise_std: 0.0,
        }
    }
}

/// One reacher task instance: initial joint configuration and a reach target.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReacherCondition {
    pub q0: [f64; 2],
    #[serde(default)]
    pub dq0: [f64; 2],
    pub target: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct ReacherEnv {
    params: ReacherParams,
    condition: ReacherCondition,
    loss: GenericLoss,
    // Constant manipulator coefficients: M(q) = [[a + 2b c2, d + b c2],
    // [d + b c2, d]] with c2 = cos(q2).
    coef_a: f64,
    coef_b: f64,
    coef_d: f64,
}

impl ReacherEnv {
    pub fn new(params: ReacherParams, condition: ReacherCondition) -> Result<Self> {
        if params.dt <= 0.0 || params.horizon == 0 {
            return Err(PilqrError::config("reacher: dt and horizon must be positive"));
        }
        if params.link_length.iter().any(|&l| l <= 0.0)
            || params.link_mass.iter().any(|&m| m <= 0.0)
        {
            return Err(PilqrError::config("reacher: link masses/lengths must be positive"));
        }
        let [m1, m2] = params.link_mass;
        let [l1, l2] = params.link_length;
        // Uniform rods: center of mass at l/2, inertia m l^2 / 12 about it.
        let (r1, r2) = (0.5 * l1, 0.5 * l2);
        let (i1, i2) = (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0);
        let coef_a = i1 + i2 + m1 * r1 * r1 + m2 * (l1 * l1 + r2 * r2);
        let coef_b = m2 * l1 * r2;
        let coef_d = i2 + m2 * r2 * r2;
        Ok(ReacherEnv {
            loss: GenericLoss::new(0.0, 1.0),
            params,
            condition,
            coef_a,
            coef_b,
            coef_d,
        })
    }

    pub fn params(&self) -> &ReacherParams {
        &self.params
    }

    pub fn condition(&self) -> &ReacherCondition {
        &self.condition
    }

    /// End-effector position for joint angles `q`.
    pub fn forward_kinematics(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let [l1, l2] = self.params.link_length;
        Vector2::new(
            l1 * q[0].cos() + l2 * (q[0] + q[1]).cos(),
            l1 * q[0].sin() + l2 * (q[0] + q[1]).sin(),
        )
    }

    /// End-effector distance to the in-state target; the evaluation metric
    /// for distillation experiments.
    pub fn ee_distance(&self, x: &DVector<f64>) -> f64 {
        let ee = self.forward_kinematics(&Vector2::new(x[0], x[1]));
        let dx = ee[0] - x[4];
        let dy = ee[1] - x[5];
        (dx * dx + dy * dy).sqrt()
    }

    fn jacobian(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let [l1, l2] = self.params.link_length;
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        Matrix2::new(
            -l1 * s1 - l2 * s12,
            -l2 * s12,
            l1 * c1 + l2 * c12,
            l2 * c12,
        )
    }
}

impl Environment for ReacherEnv {
    fn state_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_row_slice(&[
            self.condition.q0[0],
            self.condition.q0[1],
            self.condition.dq0[0],
            self.condition.dq0[1],
            self.condition.target[0],
            self.condition.target[1],
        ])
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> DVector<f64> {
        let dt = self.params.dt;
        let q = Vector2::new(x[0], x[1]);
        let dq = Vector2::new(x[2], x[3]);

        let c2 = q[1].cos();
        let s2 = q[1].sin();
        let m11 = self.coef_a + 2.0 * self.coef_b * c2;
        let m12 = self.coef_d + self.coef_b * c2;
        let m22 = self.coef_d;
        let h = self.coef_b * s2;
        // Coriolis/centrifugal torques for the standard 2-link chain.
        let cor = Vector2::new(-h * dq[1] * dq[1] - 2.0 * h * dq[0] * dq[1], h * dq[0] * dq[0]);
        let rhs = Vector2::new(u[0], u[1]) - cor - self.params.damping * dq;
        let det = m11 * m22 - m12 * m12;
        let ddq = Vector2::new(
            (m22 * rhs[0] - m12 * rhs[1]) / det,
            (m11 * rhs[1] - m12 * rhs[0]) / det,
        );

        let dq_next = dq + dt * ddq;
        let q_next = q + dt * dq_next;
        DVector::from_row_slice(&[
            q_next[0], q_next[1], dq_next[0], dq_next[1], x[4], x[5],
        ])
    }

    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> CostTerms {
        let q = Vector2::new(x[0], x[1]);
        let ee = self.forward_kinematics(&q);
        let z = DVector::from_row_slice(&[ee[0] - x[4], ee[1] - x[5]]);
        let (lv, lg, lh) = self.loss.all(&z);
        let wu = self.params.torque_penalty;

        let jac = self.jacobian(&q);
        // Second derivatives of the end-effector coordinates w.r.t. q.
        let [l1, l2] = self.params.link_length;
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        let hx = Matrix2::new(
            -l1 * c1 - l2 * c12,
            -l2 * c12,
            -l2 * c12,
            -l2 * c12,
        );
        let hy = Matrix2::new(
            -l1 * s1 - l2 * s12,
            -l2 * s12,
            -l2 * s12,
            -l2 * s12,
        );

        let jt = jac.transpose();
        let lh2 = Matrix2::new(lh[(0, 0)], lh[(0, 1)], lh[(1, 0)], lh[(1, 1)]);
        let c_qq = jt * lh2 * jac + hx * lg[0] + hy * lg[1];
        let c_qt = -(jt * lh2);

        let mut c_x = DVector::zeros(6);
        let grad_q = jt * Vector2::new(lg[0], lg[1]);
        c_x[0] = grad_q[0];
        c_x[1] = grad_q[1];
        c_x[4] = -lg[0];
        c_x[5] = -lg[1];

        let mut c_xx = DMatrix::zeros(6, 6);
        for i in 0..2 {
            for j in 0..2 {
                c_xx[(i, j)] = c_qq[(i, j)];
                c_xx[(i, 4 + j)] = c_qt[(i, j)];
                c_xx[(4 + i, j)] = c_qt[(j, i)];
                c_xx[(4 + i, 4 + j)] = lh2[(i, j)];
            }
        }

        CostTerms {
            value: lv + wu * u.norm_squared(),
            c_x,
            c_u: u * (2.0 * wu),
            c_xx,
            c_uu: DMatrix::identity(2, 2) * (2.0 * wu),
            c_xu: DMatrix::zeros(6, 2),
        }
    }

    fn cost_value(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> f64 {
        let ee = self.forward_kinematics(&Vector2::new(x[0], x[1]));
        let z = DVector::from_row_slice(&[ee[0] - x[4], ee[1] - x[5]]);
        self.loss.value(&z) + self.params.torque_penalty * u.norm_squared()
    }

    fn process_noise_std(&self) -> f64 {
        self.params.process_noise_std
    }

    fn name(&self) -> &'static str {
        "reacher"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::fd;
    use crate::rng;
    use approx::assert_relative_eq;

    fn env(target: [f64; 2]) -> ReacherEnv {
        ReacherEnv::new(
            ReacherParams::default(),
            ReacherCondition {
                q0: [0.3, -0.4],
                dq0: [0.0, 0.0],
                target,
            },
        )
        .unwrap()
    }

    #[test]
    fn forward_kinematics_known_poses() {
        let e = env([0.0, 0.0]);
        // Unit links: q = (0, pi/2) puts the elbow at (1, 0) and the end
        // effector at (1, 1).
        let ee = e.forward_kinematics(&Vector2::new(0.0, std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(ee[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ee[1], 1.0, epsilon = 1e-12);
        // Fully stretched along x.
        let ee = e.forward_kinematics(&Vector2::new(0.0, 0.0));
        assert_relative_eq!(ee[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(ee[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn target_components_are_constant() {
        let e = env([0.7, -0.2]);
        let mut x = e.initial_state();
        let u = DVector::from_row_slice(&[0.5, -0.3]);
        for t in 0..20 {
            x = e.step(&x, &u, t);
            assert_eq!(x[4], 0.7);
            assert_eq!(x[5], -0.2);
        }
    }

    #[test]
    fn passive_arm_conserves_rest() {
        // No torque, no initial velocity, no gravity: the arm stays put.
        let e = env([1.0, 1.0]);
        let x0 = e.initial_state();
        let u = DVector::zeros(2);
        let x1 = e.step(&x0, &u, 0);
        assert_relative_eq!(x1, x0, epsilon = 1e-12);
    }

    #[test]
    fn damping_dissipates_velocity() {
        let e = env([1.0, 1.0]);
        let mut x = e.initial_state();
        x[2] = 2.0;
        x[3] = -1.5;
        let u = DVector::zeros(2);
        let mut speed = (x[2] * x[2] + x[3] * x[3]).sqrt();
        for t in 0..200 {
            x = e.step(&x, &u, t);
            speed = (x[2] * x[2] + x[3] * x[3]).sqrt();
        }
        assert!(speed < 1e-2, "joint speed should decay, got {speed}");
    }

    #[test]
    fn cost_derivatives_match_fd() {
        let e = env([0.4, 0.9]);
        let mut r = rng::stream(11, 0, 0, 0);
        for t in 0..20 {
            let x = rng::standard_normal(&mut r, 6);
            let u = rng::standard_normal(&mut r, 2);
            fd::check_cost_derivatives(&e, &x, &u, t, 1e-4);
        }
    }

    #[test]
    fn ee_distance_zero_at_target() {
        let e = env([1.0, 1.0]);
        let x = DVector::from_row_slice(&[0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 1.0, 1.0]);
        assert_relative_eq!(e.ee_distance(&x), 0.0, epsilon = 1e-12);
    }
}
