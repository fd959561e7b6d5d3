//! Benchmark environments.
//!
//! Three tasks with very different local-model quality, which is the axis the
//! algorithms in this crate differ along:
//!
//! - [`lq`]: exactly linear dynamics with quadratic cost. The fitted local
//!   model is exact, so model-based updates are optimal; used as the analytic
//!   ground truth throughout the test suite.
//! - [`reacher`]: smooth 2-link arm reaching. Nonlinear but benign — local
//!   linearizations are good everywhere.
//! - [`pusher`]: a point gripper that must push a free block to a goal.
//!   Penalty-based contact makes the dynamics discontinuous, so fitted linear
//!   models are locally wrong in exactly the region that matters.
//!
//! All environments expose analytic cost derivatives (verified against finite
//! differences in the test suite) and deterministic mean dynamics; process
//! noise, when configured, is injected by the rollout sampler so that
//! stochasticity stays under the counter-based RNG scheme.

pub mod generic_loss;
pub mod lq;
pub mod pusher;
pub mod reacher;

use crate::error::Result;
use nalgebra::{DMatrix, DVector};

/// Cost value and its first/second derivatives at a single `(x, u, t)`.
///
/// `c_xu` is the cross block `d^2 c / dx du` with shape
/// `state_dim x action_dim`; `c_xx` and `c_uu` are symmetric.
#[derive(Debug, Clone)]
pub struct CostTerms {
    pub value: f64,
    pub c_x: DVector<f64>,
    pub c_u: DVector<f64>,
    pub c_xx: DMatrix<f64>,
    pub c_uu: DMatrix<f64>,
    pub c_xu: DMatrix<f64>,
}

/// A finite-horizon task with deterministic mean dynamics and a twice-
/// differentiable cost. Instances are immutable; concurrent rollouts only
/// ever read them.
pub trait Environment: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Initial state of the environment's condition.
    fn initial_state(&self) -> DVector<f64>;

    /// Deterministic mean dynamics `x_{t+1} = f(x_t, u_t, t)`.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> DVector<f64>;

    /// Cost with analytic derivatives.
    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> CostTerms;

    /// Cost value only (the default goes through [`Environment::cost`]).
    fn cost_value(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> f64 {
        self.cost(x, u, t).value
    }

    /// Standard deviation of additive i.i.d. Gaussian process noise applied
    /// by the sampler after `step`. Zero means fully deterministic.
    fn process_noise_std(&self) -> f64 {
        0.0
    }

    fn name(&self) -> &'static str;
}

/// Rolls a fixed open-loop action sequence from the initial state under the
/// mean dynamics. Returns the visited states and per-step costs; used for
/// golden-trajectory regression tests and debugging.
pub fn rollout_open_loop(
    env: &dyn Environment,
    actions: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let horizon = actions.len().min(env.horizon());
    let mut states = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    let mut x = env.initial_state();
    for (t, u) in actions.iter().take(horizon).enumerate() {
        costs.push(env.cost_value(&x, u, t));
        states.push(x.clone());
        if t + 1 < horizon {
            x = env.step(&x, u, t);
        }
    }
    Ok((states, costs))
}

#[cfg(test)]
pub(crate) mod fd {
    //! Finite-difference oracles for cost derivatives, used by the per-env
    //! derivative tests. Central differences on the *value* only, so the
    //! oracle shares no code with the analytic derivatives it checks.

    use super::*;

    pub const STEP: f64 = 1e-4;

    pub fn grad_x(env: &dyn Environment, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> DVector<f64> {
        let n = x.len();
        DVector::from_fn(n, |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += STEP;
            xm[i] -= STEP;
            (env.cost_value(&xp, u, t) - env.cost_value(&xm, u, t)) / (2.0 * STEP)
        })
    }

    pub fn grad_u(env: &dyn Environment, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> DVector<f64> {
        let m = u.len();
        DVector::from_fn(m, |i, _| {
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += STEP;
            um[i] -= STEP;
            (env.cost_value(x, &up, t) - env.cost_value(x, &um, t)) / (2.0 * STEP)
        })
    }

    /// Second differences of the value over an arbitrary pair of coordinates,
    /// where coordinates index the concatenated `[x; u]` vector.
    fn second(env: &dyn Environment, x: &DVector<f64>, u: &DVector<f64>, t: usize, i: usize, j: usize) -> f64 {
        let n = x.len();
        let eval = |di: f64, dj: f64| {
            let mut xs = x.clone();
            let mut us = u.clone();
            let mut bump = |idx: usize, by: f64| {
                if idx < n {
                    xs[idx] += by;
                } else {
                    us[idx - n] += by;
                }
            };
            bump(i, di);
            bump(j, dj);
            env.cost_value(&xs, &us, t)
        };
        (eval(STEP, STEP) - eval(STEP, -STEP) - eval(-STEP, STEP) + eval(-STEP, -STEP))
            / (4.0 * STEP * STEP)
    }

    pub fn hess(env: &dyn Environment, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> DMatrix<f64> {
        let n = x.len();
        let m = u.len();
        DMatrix::from_fn(n + m, n + m, |i, j| second(env, x, u, t, i, j))
    }

    /// Asserts analytic derivatives match the FD oracle to `tol` in relative
    /// Frobenius norm (with an absolute floor for near-zero blocks).
    pub fn check_cost_derivatives(
        env: &dyn Environment,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: usize,
        tol: f64,
    ) {
        let n = x.len();
        let m = u.len();
        let terms = env.cost(x, u, t);
        assert_eq!(terms.value, env.cost_value(x, u, t));

        let gx = grad_x(env, x, u, t);
        let gu = grad_u(env, x, u, t);
        assert!(
            (&terms.c_x - &gx).norm() <= tol * gx.norm().max(1e-6),
            "c_x mismatch: analytic {:?} vs fd {:?}",
            terms.c_x,
            gx
        );
        assert!(
            (&terms.c_u - &gu).norm() <= tol * gu.norm().max(1e-6),
            "c_u mismatch: analytic {:?} vs fd {:?}",
            terms.c_u,
            gu
        );

        let h = hess(env, x, u, t);
        let hxx = h.view((0, 0), (n, n)).into_owned();
        let huu = h.view((n, n), (m, m)).into_owned();
        let hxu = h.view((0, n), (n, m)).into_owned();
        assert!(
            (&terms.c_xx - &hxx).norm() <= tol * hxx.norm().max(1e-4),
            "c_xx mismatch"
        );
        assert!(
            (&terms.c_uu - &huu).norm() <= tol * huu.norm().max(1e-4),
            "c_uu mismatch"
        );
        assert!(
            (&terms.c_xu - &hxu).norm() <= tol * hxu.norm().max(1e-4),
            "c_xu mismatch"
        );
    }
}
