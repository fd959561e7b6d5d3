//! Second-order cost expansion and residual decomposition.
//!
//! The model-based stage optimizes a per-timestep quadratic model `c_hat` of
//! the true cost, expanded around the batch mean `(x_bar_t, u_bar_t)`:
//!
//! `c_hat(x, u) = c0 + c_x^T dx + c_u^T du + 0.5 dx^T c_xx dx
//!              + 0.5 du^T c_uu du + dx^T c_xu du`
//!
//! with `dx = x - x_bar_t`, `du = u - u_bar_t`. `c_uu` is projected onto the
//! PD cone (eigenvalue floor 1e-6) so the backward pass always has a usable
//! curvature; the projected matrix is also the one `c_hat` evaluates with, so
//! everything downstream sees one consistent quadratic model. The remainder
//! `c_tilde = c - c_hat` is what the model-free stage gets to clean up.

use crate::envs::Environment;
use crate::error::{PilqrError, Result};
use crate::linalg;
use crate::rollout::RolloutBatch;
use nalgebra::{DMatrix, DVector};

/// Eigenvalue floor applied to `c_uu`.
pub const CUU_FLOOR: f64 = 1e-6;

/// Per-timestep quadratic cost model around stored expansion points.
#[derive(Debug, Clone)]
pub struct QuadCostApprox {
    pub x_ref: Vec<DVector<f64>>,
    pub u_ref: Vec<DVector<f64>>,
    pub c0: Vec<f64>,
    pub c_x: Vec<DVector<f64>>,
    pub c_u: Vec<DVector<f64>>,
    pub c_xx: Vec<DMatrix<f64>>,
    /// PD-projected control curvature.
    pub c_uu: Vec<DMatrix<f64>>,
    pub c_xu: Vec<DMatrix<f64>>,
}

impl QuadCostApprox {
    pub fn horizon(&self) -> usize {
        self.c0.len()
    }

    /// Evaluates the quadratic model at `(x, u)`.
    pub fn eval(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref[t];
        let du = u - &self.u_ref[t];
        self.c0[t]
            + self.c_x[t].dot(&dx)
            + self.c_u[t].dot(&du)
            + 0.5 * dx.dot(&(&self.c_xx[t] * &dx))
            + 0.5 * du.dot(&(&self.c_uu[t] * &du))
            + dx.dot(&(&self.c_xu[t] * &du))
    }

    /// The same quadratic re-centered at the origin of the joint `[x; u]`
    /// space: returns `(C, c, const)` with
    /// `c_hat(x, u) = 0.5 [x;u]^T C [x;u] + c^T [x;u] + const`.
    /// This is the form the backward pass consumes.
    pub fn absolute_form(&self, t: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
        let n = self.x_ref[t].len();
        let m = self.u_ref[t].len();
        let mut big = DMatrix::zeros(n + m, n + m);
        big.view_mut((0, 0), (n, n)).copy_from(&self.c_xx[t]);
        big.view_mut((n, n), (m, m)).copy_from(&self.c_uu[t]);
        big.view_mut((0, n), (n, m)).copy_from(&self.c_xu[t]);
        big.view_mut((n, 0), (m, n))
            .copy_from(&self.c_xu[t].transpose());

        let xr = &self.x_ref[t];
        let ur = &self.u_ref[t];
        let gx = &self.c_x[t] - &self.c_xx[t] * xr - &self.c_xu[t] * ur;
        let gu = &self.c_u[t] - self.c_xu[t].transpose() * xr - &self.c_uu[t] * ur;
        let mut lin = DVector::zeros(n + m);
        lin.rows_mut(0, n).copy_from(&gx);
        lin.rows_mut(n, m).copy_from(&gu);

        let constant = self.c0[t] - self.c_x[t].dot(xr) - self.c_u[t].dot(ur)
            + 0.5 * xr.dot(&(&self.c_xx[t] * xr))
            + 0.5 * ur.dot(&(&self.c_uu[t] * ur))
            + xr.dot(&(&self.c_xu[t] * ur));
        (big, lin, constant)
    }
}

/// Expands the environment cost to second order around the per-timestep batch
/// means.
pub fn expand_cost(env: &dyn Environment, batch: &RolloutBatch) -> Result<QuadCostApprox> {
    if batch.is_empty() {
        return Err(PilqrError::config("cost expansion: empty batch"));
    }
    let horizon = batch.horizon();
    let mut approx = QuadCostApprox {
        x_ref: Vec::with_capacity(horizon),
        u_ref: Vec::with_capacity(horizon),
        c0: Vec::with_capacity(horizon),
        c_x: Vec::with_capacity(horizon),
        c_u: Vec::with_capacity(horizon),
        c_xx: Vec::with_capacity(horizon),
        c_uu: Vec::with_capacity(horizon),
        c_xu: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let x_bar = linalg::mean_vec(&batch.states_at(t));
        let u_bar = linalg::mean_vec(
            &batch
                .rollouts
                .iter()
                .map(|r| r.actions[t].clone())
                .collect::<Vec<_>>(),
        );
        let terms = env.cost(&x_bar, &u_bar, t);
        if !terms.value.is_finite() {
            return Err(PilqrError::Numerical {
                context: "cost expansion",
                t,
                msg: "non-finite cost at expansion point".into(),
            });
        }
        approx.x_ref.push(x_bar);
        approx.u_ref.push(u_bar);
        approx.c0.push(terms.value);
        approx.c_x.push(terms.c_x);
        approx.c_u.push(terms.c_u);
        approx.c_xx.push(linalg::symmetrize(&terms.c_xx));
        approx.c_uu.push(linalg::clamp_spd(&terms.c_uu, CUU_FLOOR));
        approx.c_xu.push(terms.c_xu);
    }
    Ok(approx)
}

/// Residual costs `c_tilde[i][t] = c[i][t] - c_hat(x_it, u_it)`: the part of
/// the true cost the quadratic model fails to explain at the samples.
pub fn residual_costs(batch: &RolloutBatch, approx: &QuadCostApprox) -> Vec<Vec<f64>> {
    batch
        .rollouts
        .iter()
        .map(|r| {
            (0..r.horizon())
                .map(|t| r.step_costs[t] - approx.eval(t, &r.states[t], &r.actions[t]))
                .collect()
        })
        .collect()
}
