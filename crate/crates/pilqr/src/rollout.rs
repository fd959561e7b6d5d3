//! Rollout sampling and storage.
//!
//! A rollout records everything the updates need to re-derive quantities
//! without touching the environment again: states, actions, per-step costs,
//! and — crucially — the standard-normal draws `xi` behind each action. The
//! PI2 stage of the hybrid update re-uses those draws to express the same
//! exploration noise under a *different* TVLG policy (control
//! reparametrization), which is only possible because they are stored.

use crate::envs::Environment;
use crate::error::{PilqrError, Result};
use crate::policy::TvlgPolicy;
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One sampled trajectory of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Visited states `x_t`, `t = 0..T-1`.
    pub states: Vec<DVector<f64>>,
    /// Applied actions `u_t = K_t x_t + k_t + chol(Sigma_t) xi_t`.
    pub actions: Vec<DVector<f64>>,
    /// The standard-normal draws behind each action.
    pub xi: Vec<DVector<f64>>,
    /// True (environment) cost at each step.
    pub step_costs: Vec<f64>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.step_costs.iter().sum()
    }
}

/// A batch of rollouts sampled from one policy on one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    /// Which task condition (initial state / target) the batch came from.
    pub condition_id: u64,
    /// Master seed the per-(rollout, timestep) streams were keyed with.
    pub rng_seed: u64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.rollouts[0].horizon()
    }

    pub fn state_dim(&self) -> usize {
        self.rollouts[0].states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.rollouts[0].actions[0].len()
    }

    /// Per-rollout, per-step true costs as a dense table indexed `[i][t]`.
    pub fn cost_table(&self) -> Vec<Vec<f64>> {
        self.rollouts.iter().map(|r| r.step_costs.clone()).collect()
    }

    /// States of every rollout at timestep `t`.
    pub fn states_at(&self, t: usize) -> Vec<DVector<f64>> {
        self.rollouts.iter().map(|r| r.states[t].clone()).collect()
    }

    /// States grouped per timestep, `[t][i]`.
    pub fn states_per_t(&self) -> Vec<Vec<DVector<f64>>> {
        (0..self.horizon()).map(|t| self.states_at(t)).collect()
    }

    /// Actions grouped per timestep, `[t][i]`.
    pub fn actions_per_t(&self) -> Vec<Vec<DVector<f64>>> {
        (0..self.horizon())
            .map(|t| self.rollouts.iter().map(|r| r.actions[t].clone()).collect())
            .collect()
    }

    /// Mean total cost across rollouts.
    pub fn mean_cost(&self) -> f64 {
        self.rollouts.iter().map(Rollout::total_cost).sum::<f64>() / self.len() as f64
    }

    /// Population standard deviation of total costs.
    pub fn std_cost(&self) -> f64 {
        let mean = self.mean_cost();
        let var = self
            .rollouts
            .iter()
            .map(|r| (r.total_cost() - mean).powi(2))
            .sum::<f64>()
            / self.len() as f64;
        var.sqrt()
    }

    pub fn to_json(&self) -> BatchJson {
        BatchJson {
            rollouts: self
                .rollouts
                .iter()
                .map(|r| RolloutJson {
                    states: r.states.iter().map(vec_of).collect(),
                    actions: r.actions.iter().map(vec_of).collect(),
                    xi: r.xi.iter().map(vec_of).collect(),
                    step_costs: r.step_costs.clone(),
                })
                .collect(),
            condition_id: self.condition_id,
            rng_seed: self.rng_seed,
        }
    }

    pub fn from_json(j: &BatchJson) -> Result<Self> {
        if j.rollouts.is_empty() {
            return Err(PilqrError::dim("batch JSON holds no rollouts"));
        }
        let rollouts = j
            .rollouts
            .iter()
            .map(|r| {
                let horizon = r.states.len();
                if r.actions.len() != horizon
                    || r.xi.len() != horizon
                    || r.step_costs.len() != horizon
                {
                    return Err(PilqrError::dim("rollout JSON lists have unequal lengths"));
                }
                Ok(Rollout {
                    states: r.states.iter().map(|v| DVector::from_row_slice(v)).collect(),
                    actions: r.actions.iter().map(|v| DVector::from_row_slice(v)).collect(),
                    xi: r.xi.iter().map(|v| DVector::from_row_slice(v)).collect(),
                    step_costs: r.step_costs.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RolloutBatch {
            rollouts,
            condition_id: j.condition_id,
            rng_seed: j.rng_seed,
        })
    }
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Serialization schema for [`RolloutBatch`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchJson {
    pub rollouts: Vec<RolloutJson>,
    pub condition_id: u64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutJson {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    pub step_costs: Vec<f64>,
}

/// Samples `n` rollouts of `policy` on `env`.
///
/// Rollout `i` at timestep `t` draws from the stream keyed by
/// `(seed, condition_id, i, t)`: first `action_dim` values for the action
/// noise `xi`, then `state_dim` values for process noise if the environment
/// declares any. The result is bitwise reproducible and independent of
/// evaluation order, so rollouts are sampled in parallel.
pub fn sample_rollouts(
    env: &dyn Environment,
    policy: &TvlgPolicy,
    n: usize,
    seed: u64,
    condition_id: u64,
) -> Result<RolloutBatch> {
    if n == 0 {
        return Err(PilqrError::config("sample_rollouts needs n >= 1"));
    }
    if policy.horizon() != env.horizon()
        || policy.state_dim() != env.state_dim()
        || policy.action_dim() != env.action_dim()
    {
        return Err(PilqrError::dim(format!(
            "policy ({}x{}, T={}) does not match env ({}x{}, T={})",
            policy.action_dim(),
            policy.state_dim(),
            policy.horizon(),
            env.action_dim(),
            env.state_dim(),
            env.horizon()
        )));
    }
    let chols = policy.chol_factors()?;
    let rollouts: Vec<Rollout> = (0..n)
        .into_par_iter()
        .map(|i| sample_one(env, policy, &chols, seed, condition_id, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch {
        rollouts,
        condition_id,
        rng_seed: seed,
    })
}

fn sample_one(
    env: &dyn Environment,
    policy: &TvlgPolicy,
    chols: &[DMatrix<f64>],
    seed: u64,
    condition_id: u64,
    rollout: u64,
) -> Result<Rollout> {
    let horizon = env.horizon();
    let noise_std = env.process_noise_std();
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut xis = Vec::with_capacity(horizon);
    let mut step_costs = Vec::with_capacity(horizon);

    let mut x = env.initial_state();
    for t in 0..horizon {
        let mut rng = rng::stream(seed, condition_id, rollout, t as u64);
        let xi = rng::standard_normal(&mut rng, env.action_dim());
        let u = policy.mean_action(t, &x) + &chols[t] * &xi;
        let cost = env.cost_value(&x, &u, t);
        if !cost.is_finite() || !crate::linalg::all_finite_vec(&u) {
            return Err(PilqrError::Numerical {
                context: "rollout",
                t,
                msg: format!("non-finite action or cost in rollout {rollout}"),
            });
        }
        states.push(x.clone());
        actions.push(u.clone());
        xis.push(xi);
        step_costs.push(cost);

        if t + 1 < horizon {
            let mut next = env.step(&x, &u, t);
            if noise_std > 0.0 {
                next += noise_std * rng::standard_normal(&mut rng, env.state_dim());
            }
            if !crate::linalg::all_finite_vec(&next) {
                return Err(PilqrError::Numerical {
                    context: "rollout",
                    t,
                    msg: format!("env step produced non-finite state in rollout {rollout}"),
                });
            }
            x = next;
        }
    }
    Ok(Rollout {
        states,
        actions,
        xi: xis,
        step_costs,
    })
}
