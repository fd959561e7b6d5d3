//! Per-timestep linear-Gaussian dynamics fitting.
//!
//! For each `t` with an observed transition, regress `x_{t+1}` on `[x; u; 1]`
//! across rollouts (ridge-regularized least squares), giving
//! `x_{t+1} ~ N(f_x x + f_u u + f_c, F)` with `F` the residual covariance.
//! The fit is local to the current batch: it describes the dynamics where the
//! current policy operates, not globally.

use crate::error::{PilqrError, Result};
use crate::linalg;
use crate::rollout::RolloutBatch;
use nalgebra::{DMatrix, DVector};

/// Time-varying linear-Gaussian dynamics model for timesteps `0..T-1`.
#[derive(Debug, Clone)]
pub struct FittedDynamics {
    pub f_x: Vec<DMatrix<f64>>,
    pub f_u: Vec<DMatrix<f64>>,
    pub f_c: Vec<DVector<f64>>,
    /// Residual covariance `F_t` (includes the `reg * I` floor).
    pub noise: Vec<DMatrix<f64>>,
}

impl FittedDynamics {
    /// Number of modeled transitions (`T - 1` for rollouts of length `T`).
    pub fn len(&self) -> usize {
        self.f_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_x.is_empty()
    }

    /// Mean prediction `f_x x + f_u u + f_c`.
    pub fn predict(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.f_x[t] * x + &self.f_u[t] * u + &self.f_c[t]
    }

    /// Exact dynamics of a known linear system, for tests and ground-truth
    /// comparisons: `f_x = A`, `f_u = B`, `f_c = 0`, `F = noise_cov`.
    pub fn exact_linear(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        noise_cov: &DMatrix<f64>,
        transitions: usize,
    ) -> Self {
        FittedDynamics {
            f_x: vec![a.clone(); transitions],
            f_u: vec![b.clone(); transitions],
            f_c: vec![DVector::zeros(a.nrows()); transitions],
            noise: vec![noise_cov.clone(); transitions],
        }
    }
}

/// Fits TVLG dynamics to one batch. See [`fit_dynamics_pooled`].
pub fn fit_dynamics(batch: &RolloutBatch, reg: f64) -> Result<FittedDynamics> {
    fit_dynamics_pooled(std::slice::from_ref(batch), reg)
}

/// Fits TVLG dynamics to the union of several batches (all sampled on the
/// same condition). Pooling recent batches is how small per-iteration budgets
/// (a handful of episodes) still produce a well-posed regression.
pub fn fit_dynamics_pooled(batches: &[RolloutBatch], reg: f64) -> Result<FittedDynamics> {
    if reg < 0.0 {
        return Err(PilqrError::config("dynamics fit: reg must be >= 0"));
    }
    if batches.is_empty() || batches.iter().all(|b| b.is_empty()) {
        return Err(PilqrError::config("dynamics fit: no rollouts"));
    }
    let horizon = batches[0].horizon();
    let n_dim = batches[0].state_dim();
    let m_dim = batches[0].action_dim();
    for b in batches {
        if b.horizon() != horizon || b.state_dim() != n_dim || b.action_dim() != m_dim {
            return Err(PilqrError::dim("dynamics fit: batches disagree on shapes"));
        }
    }
    let rollouts: Vec<_> = batches.iter().flat_map(|b| b.rollouts.iter()).collect();
    let count = rollouts.len();
    let p = n_dim + m_dim + 1;

    let mut f_x = Vec::with_capacity(horizon - 1);
    let mut f_u = Vec::with_capacity(horizon - 1);
    let mut f_c = Vec::with_capacity(horizon - 1);
    let mut noise = Vec::with_capacity(horizon - 1);
    let weights = vec![1.0; count];

    for t in 0..horizon - 1 {
        let mut design = DMatrix::zeros(count, p);
        let mut target = DMatrix::zeros(count, n_dim);
        for (row, r) in rollouts.iter().enumerate() {
            for j in 0..n_dim {
                design[(row, j)] = r.states[t][j];
                target[(row, j)] = r.states[t + 1][j];
            }
            for j in 0..m_dim {
                design[(row, n_dim + j)] = r.actions[t][j];
            }
            design[(row, p - 1)] = 1.0;
        }
        let theta = linalg::ridge_regression(&design, &target, &weights, reg)
            .ok_or(PilqrError::Singular {
                context: "dynamics fit",
                t,
            })?;
        // theta is p x n: rows index [x; u; 1] features, columns the next
        // state. Transpose into the f_x/f_u/f_c layout.
        let theta_t = theta.transpose();
        let fx = theta_t.columns(0, n_dim).into_owned();
        let fu = theta_t.columns(n_dim, m_dim).into_owned();
        let fc = theta_t.column(p - 1).into_owned();

        let mut cov = DMatrix::zeros(n_dim, n_dim);
        for r in rollouts.iter() {
            let pred = &fx * &r.states[t] + &fu * &r.actions[t] + &fc;
            let resid = &r.states[t + 1] - pred;
            cov.syger(1.0 / count as f64, &resid, &resid, 1.0);
        }
        cov.fill_upper_triangle_with_lower_triangle();
        for d in 0..n_dim {
            cov[(d, d)] += reg;
        }

        f_x.push(fx);
        f_u.push(fu);
        f_c.push(fc);
        noise.push(cov);
    }

    Ok(FittedDynamics { f_x, f_u, f_c, noise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::lq::{LqEnv, LqParams};
    use crate::policy::TvlgPolicy;
    use crate::rollout::sample_rollouts;
    use approx::assert_relative_eq;

    #[test]
    fn recovers_exact_linear_dynamics_from_noiseless_data() {
        let params = LqParams::random(3, 2, 12, 0.0, 21);
        let env = LqEnv::from_params(params.clone()).unwrap();
        let policy = TvlgPolicy::zero_mean(12, 3, 2, 1.0);
        let batch = sample_rollouts(&env, &policy, 30, 7, 0).unwrap();
        let fit = fit_dynamics(&batch, 1e-9).unwrap();
        for t in 0..fit.len() {
            assert_relative_eq!(fit.f_x[t], params.a, epsilon = 1e-6);
            assert_relative_eq!(fit.f_u[t], params.b, epsilon = 1e-6);
            assert_relative_eq!(fit.f_c[t].norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn noise_covariance_recovered_within_20_percent() {
        // Process noise std 0.1 => F = 0.01 I. N = 200 rollouts.
        let params = LqParams::random(2, 1, 6, 0.1, 22);
        let env = LqEnv::from_params(params).unwrap();
        let policy = TvlgPolicy::zero_mean(6, 2, 1, 1.0);
        let batch = sample_rollouts(&env, &policy, 200, 9, 0).unwrap();
        let fit = fit_dynamics(&batch, 1e-9).unwrap();
        let truth = DMatrix::identity(2, 2) * 0.01;
        for t in 0..fit.len() {
            let rel = (&fit.noise[t] - &truth).norm() / truth.norm();
            assert!(rel < 0.2, "F_t off by {:.1}% at t={t}", rel * 100.0);
        }
    }

    #[test]
    fn rank_deficient_design_without_reg_names_the_timestep() {
        // A single rollout cannot identify a 2+1+1-column regression.
        let params = LqParams::random(2, 1, 5, 0.0, 23);
        let env = LqEnv::from_params(params).unwrap();
        let policy = TvlgPolicy::zero_mean(5, 2, 1, 0.5);
        let batch = sample_rollouts(&env, &policy, 1, 3, 0).unwrap();
        match fit_dynamics(&batch, 0.0) {
            Err(PilqrError::Singular { context, t: _ }) => {
                assert_eq!(context, "dynamics fit");
            }
            other => panic!("expected singularity error, got {other:?}"),
        }
        // With regularization the same data fits fine.
        assert!(fit_dynamics(&batch, 1e-6).is_ok());
    }

    #[test]
    fn fit_is_invariant_to_rollout_ordering() {
        let params = LqParams::random(2, 2, 8, 0.05, 25);
        let env = LqEnv::from_params(params).unwrap();
        let policy = TvlgPolicy::zero_mean(8, 2, 2, 1.0);
        let batch = sample_rollouts(&env, &policy, 25, 55, 0).unwrap();
        let mut reversed = batch.clone();
        reversed.rollouts.reverse();
        let a = fit_dynamics(&batch, 1e-8).unwrap();
        let b = fit_dynamics(&reversed, 1e-8).unwrap();
        for t in 0..a.len() {
            assert_relative_eq!(a.f_x[t], b.f_x[t], epsilon = 1e-9);
            assert_relative_eq!(a.f_u[t], b.f_u[t], epsilon = 1e-9);
            assert_relative_eq!(a.f_c[t], b.f_c[t], epsilon = 1e-9);
            assert_relative_eq!(a.noise[t], b.noise[t], epsilon = 1e-9);
        }
    }

    #[test]
    fn pooling_batches_matches_one_big_batch() {
        let params = LqParams::random(2, 1, 6, 0.0, 24);
        let env = LqEnv::from_params(params).unwrap();
        let policy = TvlgPolicy::zero_mean(6, 2, 1, 1.0);
        let b1 = sample_rollouts(&env, &policy, 10, 100, 0).unwrap();
        let b2 = sample_rollouts(&env, &policy, 10, 101, 0).unwrap();
        let mut merged = b1.clone();
        merged.rollouts.extend(b2.rollouts.iter().cloned());
        let pooled = fit_dynamics_pooled(&[b1, b2], 1e-8).unwrap();
        let merged_fit = fit_dynamics(&merged, 1e-8).unwrap();
        for t in 0..pooled.len() {
            assert_relative_eq!(pooled.f_x[t], merged_fit.f_x[t], epsilon = 1e-12);
            assert_relative_eq!(pooled.noise[t], merged_fit.noise[t], epsilon = 1e-12);
        }
    }
}
