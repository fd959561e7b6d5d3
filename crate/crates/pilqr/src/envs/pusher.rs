//! Planar gripper-pusher.
//!
//! A point gripper (double integrator, directly force-controlled) must push a
//! free block to a goal position. Contact is a one-sided penalty spring: when
//! the gripper comes within `contact_radius` of the block center, the block is
//! accelerated along the center-to-center direction in proportion to the
//! overlap. The gripper feels the reaction. The block sits on high-friction
//! ground: with the default damping the friction cancels its inertia within a
//! single step, so the block moves while pushed and is exactly stationary on
//! every step without contact.
//!
//! The on/off contact force makes the dynamics discontinuous in state: a
//! fitted linear model averages "touching" and "not touching" regimes and is
//! systematically wrong near the contact boundary. That is the regime this
//! task exists to probe.
//!
//! State: `[gx, gy, gvx, gvy, bx, by, bvx, bvy]`; action: force on the
//! gripper. Cost: `4 * l(block - goal) + l(gripper - block) + w_u ||u||^2`
//! with both losses using `alpha = 10, beta = 0.1`.

use super::generic_loss::GenericLoss;
use super::{CostTerms, Environment};
use crate::error::{PilqrError, Result};
use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PusherParams {
    pub gripper_mass: f64,
    pub block_mass: f64,
    /// Viscous damping on the gripper velocity (per second).
    pub gripper_damping: f64,
    /// Ground-friction damping on the block velocity (per second). The
    /// default satisfies `block_damping * dt = 1`, which kills the block's
    /// carried-over velocity completely each step: the block displaces only
    /// under a live contact force and freezes the moment contact ends.
    pub block_damping: f64,
    /// Center distance below which the penalty spring engages.
    pub contact_radius: f64,
    /// Penalty spring stiffness.
    pub contact_stiffness: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Weight of the control penalty `w_u ||u||^2`.
    pub control_penalty: f64,
    pub process_noise_std: f64,
}

impl Default for PusherParams {
    fn default() -> Self {
        PusherParams {
            gripper_mass: 1.0,
            block_mass: 0.5,
            gripper_damping: 2.0,
            block_damping: 20.0,
            contact_radius: 0.12,
            contact_stiffness: 120.0,
            dt: 0.05,
            horizon: 100,
            control_penalty: 1e-3,
            process_noise_std: 0.0,
        }
    }
}

/// One pusher task instance: where the gripper and block start and where the
/// block has to go. Velocities start at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PusherCondition {
    pub gripper: [f64; 2],
    pub block: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct PusherEnv {
    params: PusherParams,
    condition: PusherCondition,
    block_loss: GenericLoss,
    gripper_loss: GenericLoss,
}

impl PusherEnv {
    pub fn new(params: PusherParams, condition: PusherCondition) -> Result<Self> {
        if params.dt <= 0.0 || params.horizon == 0 {
            return Err(PilqrError::config("pusher: dt and horizon must be positive"));
        }
        if params.gripper_mass <= 0.0 || params.block_mass <= 0.0 {
            return Err(PilqrError::config("pusher: masses must be positive"));
        }
        if params.contact_radius <= 0.0 || params.contact_stiffness < 0.0 {
            return Err(PilqrError::config(
                "pusher: contact radius must be positive and stiffness nonnegative",
            ));
        }
        if params.gripper_damping * params.dt >= 1.0 {
            return Err(PilqrError::config(
                "pusher: gripper damping * dt must stay below 1 for a stable explicit update",
            ));
        }
        if params.block_damping * params.dt > 1.0 {
            return Err(PilqrError::config(
                "pusher: block damping * dt must not exceed 1 (1 = full stop per step)",
            ));
        }
        Ok(PusherEnv {
            params,
            condition,
            block_loss: GenericLoss::new(10.0, 0.1),
            gripper_loss: GenericLoss::new(10.0, 0.1),
        })
    }

    pub fn params(&self) -> &PusherParams {
        &self.params
    }

    pub fn condition(&self) -> &PusherCondition {
        &self.condition
    }

    /// Block distance to goal; the evaluation metric for this task.
    pub fn block_goal_distance(&self, x: &DVector<f64>) -> f64 {
        let dx = x[4] - self.condition.goal[0];
        let dy = x[5] - self.condition.goal[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Contact force exerted on the block for the given positions; zero when
    /// the gripper is outside the contact radius.
    pub fn contact_force(&self, gripper: Vector2<f64>, block: Vector2<f64>) -> Vector2<f64> {
        let delta = block - gripper;
        let dist = delta.norm();
        let overlap = self.params.contact_radius - dist;
        if overlap <= 0.0 {
            return Vector2::zeros();
        }
        // Degenerate exact overlap: push along +x by convention.
        let dir = if dist > 1e-9 {
            delta / dist
        } else {
            Vector2::new(1.0, 0.0)
        };
        dir * (self.params.contact_stiffness * overlap)
    }
}

impl Environment for PusherEnv {
    fn state_dim(&self) -> usize {
        8
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_row_slice(&[
            self.condition.gripper[0],
            self.condition.gripper[1],
            0.0,
            0.0,
            self.condition.block[0],
            self.condition.block[1],
            0.0,
            0.0,
        ])
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> DVector<f64> {
        let p = &self.params;
        let dt = p.dt;
        let g = Vector2::new(x[0], x[1]);
        let gv = Vector2::new(x[2], x[3]);
        let b = Vector2::new(x[4], x[5]);
        let bv = Vector2::new(x[6], x[7]);

        let force = self.contact_force(g, b);
        let gv_next =
            gv * (1.0 - p.gripper_damping * dt) + (Vector2::new(u[0], u[1]) - force) * (dt / p.gripper_mass);
        let bv_next = bv * (1.0 - p.block_damping * dt) + force * (dt / p.block_mass);
        let g_next = g + gv_next * dt;
        let b_next = b + bv_next * dt;

        DVector::from_row_slice(&[
            g_next[0], g_next[1], gv_next[0], gv_next[1], b_next[0], b_next[1], bv_next[0],
            bv_next[1],
        ])
    }

    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> CostTerms {
        let wu = self.params.control_penalty;
        let zb = DVector::from_row_slice(&[
            x[4] - self.condition.goal[0],
            x[5] - self.condition.goal[1],
        ]);
        let zg = DVector::from_row_slice(&[x[0] - x[4], x[1] - x[5]]);
        let (bv, bg, bh) = self.block_loss.all(&zb);
        let (gv, gg, gh) = self.gripper_loss.all(&zg);

        let mut c_x = DVector::zeros(8);
        c_x[0] = gg[0];
        c_x[1] = gg[1];
        c_x[4] = 4.0 * bg[0] - gg[0];
        c_x[5] = 4.0 * bg[1] - gg[1];

        let mut c_xx = DMatrix::zeros(8, 8);
        for i in 0..2 {
            for j in 0..2 {
                // d^2/dg dg of the gripper-block term.
                c_xx[(i, j)] = gh[(i, j)];
                // Cross blocks between gripper and block positions.
                c_xx[(i, 4 + j)] = -gh[(i, j)];
                c_xx[(4 + i, j)] = -gh[(i, j)];
                // Block-block: both terms contribute.
                c_xx[(4 + i, 4 + j)] = 4.0 * bh[(i, j)] + gh[(i, j)];
            }
        }

        CostTerms {
            value: 4.0 * bv + gv + wu * u.norm_squared(),
            c_x,
            c_u: u * (2.0 * wu),
            c_xx,
            c_uu: DMatrix::identity(2, 2) * (2.0 * wu),
            c_xu: DMatrix::zeros(8, 2),
        }
    }

    fn cost_value(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> f64 {
        let zb = DVector::from_row_slice(&[
            x[4] - self.condition.goal[0],
            x[5] - self.condition.goal[1],
        ]);
        let zg = DVector::from_row_slice(&[x[0] - x[4], x[1] - x[5]]);
        4.0 * self.block_loss.value(&zb)
            + self.gripper_loss.value(&zg)
            + self.params.control_penalty * u.norm_squared()
    }

    fn process_noise_std(&self) -> f64 {
        self.params.process_noise_std
    }

    fn name(&self) -> &'static str {
        "pusher"
    }
}
