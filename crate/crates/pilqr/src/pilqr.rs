//! The hybrid two-stage policy update, and the iteration driver around it.
//!
//! One iteration takes a batch sampled from the current policy and splits the
//! improvement between two solvers working on a decomposition of the sampled
//! cost-to-go `S = S_hat + S_tilde`:
//!
//! 1. the model-based stage (KL-constrained LQR on fitted dynamics) optimizes
//!    the quadratic cost model, which accounts for exactly `S_hat` — the
//!    cost-to-go the quadratic model predicts for each sampled noise
//!    realization when replayed under the fitted dynamics;
//! 2. the model-free stage (the path-integral update) reweights the samples
//!    by the leftover `S_tilde` and refits the policy by weighted maximum
//!    likelihood, using controls reparametrized under the stage-1 policy —
//!    the stored noise `xi` replayed through the new `(K, k, Sigma)`.
//!
//! The split is exact: `softmax(-(S_hat + S_tilde)/eta)` factors into the
//! stage-1 exponential (absorbed in closed form by the LQR solve) times
//! `exp(-S_tilde/eta)`. When the quadratic model explains the samples well,
//! stage 2 sees near-constant scores and reduces to a no-op; when the model
//! explains nothing, stage 1 is inert and stage 2 is a full path-integral
//! update. The per-timestep KL budget `eps_t` is steered between iterations
//! by the measured ratio of residual to total cost-to-go.

use crate::cost_approx::{expand_cost, QuadCostApprox};
use crate::dyn_fit::{fit_dynamics_pooled, FittedDynamics};
use crate::envs::Environment;
use crate::error::{PilqrError, Result};
use crate::lqr_flm::{backward_pass, BackwardPassOutcome, LqrFlmOptions};
use crate::pi2::{cost_to_go, dual_eta, pi2_weights, weighted_ml_update, MlUpdateOptions};
use crate::policy::TvlgPolicy;
use crate::rng;
use crate::rollout::{sample_rollouts, RolloutBatch};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Simulated-state norm beyond which a replayed trajectory counts as
/// diverged; the sample's weight is zeroed for the affected timesteps.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Guard against division by a vanishing mean cost in the step-adjustment
/// ratio.
const RATIO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Two-stage hybrid update.
    Pilqr,
    /// Model-based stage only.
    LqrFlm,
    /// Model-free stage only, on raw costs-to-go.
    Pi2,
}

/// Tuning knobs of the iteration. All fields have serde defaults so configs
/// only spell out what they change.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilqrConfig {
    pub algorithm: Algorithm,
    /// Rollouts sampled per iteration.
    pub n_rollouts: usize,
    /// Initial per-timestep KL budget (nats).
    pub eps_init: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Residual ratio below which the budget grows (the model is trusted).
    pub ratio_lo: f64,
    /// Residual ratio above which the budget shrinks.
    pub ratio_hi: f64,
    /// Multiplicative budget step.
    pub eps_mult: f64,
    /// Ridge regularization of the dynamics fit.
    pub dyn_reg: f64,
    /// Ridge regularization of the weighted ML refit.
    pub ml_reg: f64,
    /// Damping of the covariance refit toward the ML estimate.
    pub cov_damping: f64,
    /// Eigenvalue floor for policy covariances.
    pub sigma_floor: f64,
    /// Standard deviation of the initial zero-mean policy.
    pub init_noise_std: f64,
    /// Fixed KL budget for the model-free stage; `None` reuses the adapted
    /// per-timestep schedule.
    pub pi2_eps_override: Option<f64>,
    /// Solve the model-free temperature on the full costs-to-go `S` instead
    /// of the residuals `S_tilde` (the weights stay `softmax(-S_tilde/eta)`
    /// either way).
    pub pi2_eta_on_full_s: bool,
    /// Keep gains fixed in the model-free refit; update offsets only.
    pub freeze_gains: bool,
    /// How many previous batches to pool into the dynamics fit, on top of the
    /// current one.
    pub dyn_history: usize,
}

impl Default for PilqrConfig {
    fn default() -> Self {
        PilqrConfig {
            algorithm: Algorithm::Pilqr,
            n_rollouts: 20,
            eps_init: 1.0,
            eps_min: 0.01,
            eps_max: 10.0,
            ratio_lo: 0.2,
            ratio_hi: 0.5,
            eps_mult: 2.0,
            dyn_reg: 1e-6,
            ml_reg: 1e-8,
            cov_damping: 0.9,
            sigma_floor: 1e-6,
            init_noise_std: 1.0,
            pi2_eps_override: None,
            pi2_eta_on_full_s: false,
            freeze_gains: false,
            dyn_history: 0,
        }
    }
}

impl PilqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts < 2 {
            return Err(PilqrError::config("config: n_rollouts must be at least 2"));
        }
        if !(self.eps_min > 0.0 && self.eps_min < self.eps_max) {
            return Err(PilqrError::config("config: need 0 < eps_min < eps_max"));
        }
        if !(self.eps_init >= self.eps_min && self.eps_init <= self.eps_max) {
            return Err(PilqrError::config(
                "config: eps_init must lie within [eps_min, eps_max]",
            ));
        }
        if !(self.ratio_lo > 0.0 && self.ratio_lo < self.ratio_hi) {
            return Err(PilqrError::config("config: need 0 < ratio_lo < ratio_hi"));
        }
        if !(self.eps_mult > 1.0) {
            return Err(PilqrError::config("config: eps_mult must exceed 1"));
        }
        if !(self.cov_damping > 0.0 && self.cov_damping <= 1.0) {
            return Err(PilqrError::config("config: cov_damping must be in (0, 1]"));
        }
        if !(self.dyn_reg >= 0.0 && self.ml_reg >= 0.0) {
            return Err(PilqrError::config("config: regularizers must be nonnegative"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(PilqrError::config("config: sigma_floor must be positive"));
        }
        if !(self.init_noise_std > 0.0) {
            return Err(PilqrError::config("config: init_noise_std must be positive"));
        }
        if let Some(e) = self.pi2_eps_override {
            if !(e > 0.0) {
                return Err(PilqrError::config("config: pi2_eps_override must be positive"));
            }
        }
        Ok(())
    }

    fn lqr_options(&self) -> LqrFlmOptions {
        LqrFlmOptions {
            sigma_floor: self.sigma_floor,
            ..LqrFlmOptions::default()
        }
    }

    fn ml_options(&self) -> MlUpdateOptions {
        MlUpdateOptions {
            reg: self.ml_reg,
            cov_damping: self.cov_damping,
            sigma_floor: self.sigma_floor,
            freeze_gains: self.freeze_gains,
            ..MlUpdateOptions::default()
        }
    }
}

/// Model-predicted costs-to-go, per (rollout, anchor timestep).
#[derive(Debug, Clone)]
pub struct ShatEvaluation {
    /// `s_hat[i][t]`: the quadratic model's cost-to-go for rollout `i`
    /// replayed from its sampled `(x_t, u_t)` under the fitted mean dynamics.
    pub s_hat: Vec<Vec<f64>>,
    /// Replay left the trusted region (`||x|| > DIVERGENCE_NORM`) or went
    /// non-finite somewhere in the suffix.
    pub diverged: Vec<Vec<bool>>,
}

/// Replays each sample's suffix under the fitted mean dynamics and sums the
/// quadratic cost model over it.
///
/// From anchor `(x_{i,t}, u_{i,t})`, later controls follow the deterministic
/// form of the sampling policy on the stored noise,
/// `u_j = K_j x_j + k_j + chol(Sigma_j) xi_{i,j}`, and states follow
/// `x_{j+1} = f_x x_j + f_u u_j + f_c`. The result is what the model-based
/// stage believes each sample's cost-to-go is; subtracting it from the true
/// cost-to-go leaves the residual the model-free stage works on.
pub fn eval_shat(
    batch: &RolloutBatch,
    dynamics: &FittedDynamics,
    cost: &QuadCostApprox,
    sampling_policy: &TvlgPolicy,
) -> Result<ShatEvaluation> {
    let horizon = batch.horizon();
    if cost.horizon() != horizon || sampling_policy.horizon() != horizon {
        return Err(PilqrError::dim(
            "eval_shat: batch, cost model and policy must share the horizon",
        ));
    }
    if dynamics.len() + 1 != horizon {
        return Err(PilqrError::dim(format!(
            "eval_shat: need {} fitted transitions for horizon {}, got {}",
            horizon - 1,
            horizon,
            dynamics.len()
        )));
    }
    let chols = sampling_policy.chol_factors()?;

    let rows: Vec<(Vec<f64>, Vec<bool>)> = batch
        .rollouts
        .par_iter()
        .map(|rollout| {
            let mut s_hat = vec![0.0; horizon];
            let mut diverged = vec![false; horizon];
            for t in 0..horizon {
                let mut x = rollout.states[t].clone();
                let mut total = 0.0;
                let mut bad = false;
                for j in t..horizon {
                    // The anchor keeps its sampled control exactly; later
                    // steps replay the stored noise through the policy.
                    let u = if j == t {
                        rollout.actions[t].clone()
                    } else {
                        sampling_policy.mean_action(j, &x) + &chols[j] * &rollout.xi[j]
                    };
                    total += cost.eval(j, &x, &u);
                    if j + 1 < horizon {
                        x = dynamics.predict(j, &x, &u);
                        if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
                            bad = true;
                            break;
                        }
                    }
                }
                s_hat[t] = total;
                diverged[t] = bad || !total.is_finite();
            }
            (s_hat, diverged)
        })
        .collect();

    Ok(ShatEvaluation {
        s_hat: rows.iter().map(|(s, _)| s.clone()).collect(),
        diverged: rows.into_iter().map(|(_, d)| d).collect(),
    })
}

/// Replays every stored noise draw through `p_hat`:
/// `u_hat[t][i] = K_t x_{i,t} + k_t + chol(Sigma_t) xi_{i,t}`.
///
/// Because the stored `xi` are standard normal and independent of `x_{i,t}`,
/// the result is an unbiased sample of `p_hat` at the sampled states without
/// new rollouts. Indexed `[t][i]` to line up with the ML-refit tables.
pub fn reparametrize_controls(
    batch: &RolloutBatch,
    p_hat: &TvlgPolicy,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let horizon = batch.horizon();
    if p_hat.horizon() != horizon {
        return Err(PilqrError::dim(
            "reparametrize_controls: policy horizon must match the batch",
        ));
    }
    let chols = p_hat.chol_factors()?;
    Ok((0..horizon)
        .map(|t| {
            batch
                .rollouts
                .iter()
                .map(|r| p_hat.mean_action(t, &r.states[t]) + &chols[t] * &r.xi[t])
                .collect()
        })
        .collect())
}

/// Per-timestep ratio of residual to total cost-to-go magnitude:
/// `r_t = mean_i |s_tilde[i][t]| / max(mean_i |s[i][t]|, tiny)`.
pub fn residual_ratios(s: &[Vec<f64>], s_tilde: &[Vec<f64>]) -> Vec<f64> {
    let horizon = s.first().map_or(0, |row| row.len());
    let n = s.len() as f64;
    (0..horizon)
        .map(|t| {
            let mean_abs_resid: f64 = s_tilde.iter().map(|row| row[t].abs()).sum::<f64>() / n;
            let mean_abs_total: f64 = s.iter().map(|row| row[t].abs()).sum::<f64>() / n;
            mean_abs_resid / mean_abs_total.max(RATIO_FLOOR)
        })
        .collect()
}

/// The trust-the-model-or-not rule: a small residual ratio grows the KL
/// budget (the quadratic model is explaining the samples, take bigger steps),
/// a large one shrinks it. In between, the budget is left alone.
pub fn adjust_eps(eps_prev: &[f64], ratios: &[f64], cfg: &PilqrConfig) -> Vec<f64> {
    eps_prev
        .iter()
        .zip(ratios)
        .map(|(&e, &r)| {
            if r < cfg.ratio_lo {
                (e * cfg.eps_mult).min(cfg.eps_max)
            } else if r > cfg.ratio_hi {
                (e / cfg.eps_mult).max(cfg.eps_min)
            } else {
                e
            }
        })
        .collect()
}

/// Diagnostics of the model-free stage.
#[derive(Debug, Clone)]
pub struct Pi2StageInfo {
    /// Temperature per timestep (NaN where the stage was skipped).
    pub eta: Vec<f64>,
    /// Final normalized weights, `[t][i]`; zero for diverged samples.
    pub weights: Vec<Vec<f64>>,
    /// Timesteps where fewer than two usable samples remained: the stage-1
    /// policy row is kept as is.
    pub skipped: Vec<bool>,
}

/// One model-free update: per timestep, a KL-bounded softmax over scores and
/// a weighted ML refit of `(states, controls)` starting from `prev`.
///
/// `scores[i][t]` drive the weights; `eta_scores` (same shape), when given,
/// are used for the temperature solve instead. `valid[i][t] = false` removes
/// a sample at that timestep.
#[allow(clippy::too_many_arguments)]
pub fn pi2_stage(
    states: &[Vec<DVector<f64>>],
    controls: &[Vec<DVector<f64>>],
    scores: &[Vec<f64>],
    eta_scores: Option<&[Vec<f64>]>,
    valid: Option<&[Vec<bool>]>,
    eps: &[f64],
    prev: &TvlgPolicy,
    cfg: &PilqrConfig,
) -> Result<(TvlgPolicy, Pi2StageInfo)> {
    let horizon = prev.horizon();
    let n_samples = scores.len();
    if states.len() != horizon || controls.len() != horizon || eps.len() != horizon {
        return Err(PilqrError::dim(
            "pi2_stage: tables must cover the policy horizon",
        ));
    }
    let mut etas = vec![f64::NAN; horizon];
    let mut weights = vec![vec![0.0; n_samples]; horizon];
    let mut skipped = vec![false; horizon];

    for t in 0..horizon {
        let usable: Vec<usize> = (0..n_samples)
            .filter(|&i| valid.map_or(true, |v| v[i][t]) && scores[i][t].is_finite())
            .collect();
        if usable.len() < 2 {
            skipped[t] = true;
            continue;
        }
        let stage_scores: Vec<f64> = usable.iter().map(|&i| scores[i][t]).collect();
        let dual_scores: Vec<f64> = match eta_scores {
            Some(full) => usable.iter().map(|&i| full[i][t]).collect(),
            None => stage_scores.clone(),
        };
        let eps_t = cfg.pi2_eps_override.unwrap_or(eps[t]);
        let sol = dual_eta(&dual_scores, eps_t)?;
        let w = pi2_weights(&stage_scores, sol.eta);
        for (&i, &wi) in usable.iter().zip(&w) {
            weights[t][i] = wi;
        }
        etas[t] = sol.eta;
    }

    // The refit runs over all timesteps at once; skipped rows get uniform
    // placeholder weights and are overwritten with the previous policy's row
    // afterwards.
    let ml_weights: Vec<Vec<f64>> = (0..horizon)
        .map(|t| {
            if skipped[t] {
                vec![1.0 / n_samples as f64; n_samples]
            } else {
                weights[t].clone()
            }
        })
        .collect();
    let (mut policy, _report) =
        weighted_ml_update(states, controls, &ml_weights, prev, &cfg.ml_options())?;
    for t in 0..horizon {
        if skipped[t] {
            policy.gains[t] = prev.gains[t].clone();
            policy.offsets[t] = prev.offsets[t].clone();
            policy.covariances[t] = prev.covariances[t].clone();
        }
    }

    Ok((
        policy,
        Pi2StageInfo {
            eta: etas,
            weights,
            skipped,
        },
    ))
}

/// Everything one hybrid update produces.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    /// The committed policy (stage 2 output, or stage 1 for the model-based
    /// variant).
    pub policy: TvlgPolicy,
    /// The stage-1 (model-based) policy.
    pub p_hat: TvlgPolicy,
    /// KL budgets actually used this update (after adjustment).
    pub eps: Vec<f64>,
    /// Residual-to-total cost-to-go ratio per timestep.
    pub residual_ratio: Vec<f64>,
    /// Stage-1 dual variables per timestep.
    pub eta_lqr: Vec<f64>,
    /// Stage-2 temperatures per timestep (NaN where skipped or disabled).
    pub eta_pi2: Vec<f64>,
    /// Stage-2 weights, `[t][i]` (empty for the model-based variant).
    pub pi2_weights: Vec<Vec<f64>>,
    /// Stage-2 skip flags.
    pub pi2_skipped: Vec<bool>,
    /// Stage-1 solver diagnostics.
    pub lqr: BackwardPassOutcome,
}

/// One hybrid (or model-based-only) update from an existing batch and fitted
/// models. Pure: no sampling, no mutation — the caller owns the commit.
///
/// `sampling_policy` is the policy the batch was sampled from; it drives the
/// replay in `eval_shat`. `constraint` is the policy the KL trust region is
/// measured against — the same object in plain operation, the linearized
/// global policy when a distillation layer wraps the update.
pub fn pilqr_update(
    batch: &RolloutBatch,
    dynamics: &FittedDynamics,
    cost: &QuadCostApprox,
    sampling_policy: &TvlgPolicy,
    constraint: &TvlgPolicy,
    eps_prev: &[f64],
    cfg: &PilqrConfig,
) -> Result<UpdateOutcome> {
    cfg.validate()?;
    if cfg.algorithm == Algorithm::Pi2 {
        return Err(PilqrError::config(
            "pilqr_update: the model-free variant has no model stage; use pi2_stage",
        ));
    }
    let s = cost_to_go(&batch.cost_table());
    let shat = eval_shat(batch, dynamics, cost, sampling_policy)?;
    let s_tilde: Vec<Vec<f64>> = s
        .iter()
        .zip(&shat.s_hat)
        .map(|(srow, hrow)| srow.iter().zip(hrow).map(|(a, b)| a - b).collect())
        .collect();
    let ratios = residual_ratios(&s, &s_tilde);
    let eps = adjust_eps(eps_prev, &ratios, cfg);

    let states = batch.states_per_t();
    let lqr = backward_pass(dynamics, cost, constraint, &eps, &states, &cfg.lqr_options())?;
    let p_hat = lqr.policy.clone();

    if cfg.algorithm == Algorithm::LqrFlm {
        let horizon = batch.horizon();
        return Ok(UpdateOutcome {
            policy: p_hat.clone(),
            p_hat,
            eps,
            residual_ratio: ratios,
            eta_lqr: lqr.eta.clone(),
            eta_pi2: vec![f64::NAN; horizon],
            pi2_weights: Vec::new(),
            pi2_skipped: vec![true; horizon],
            lqr,
        })
    }

    let u_hat = reparametrize_controls(batch, &p_hat)?;
    let valid: Vec<Vec<bool>> = shat
        .diverged
        .iter()
        .map(|row| row.iter().map(|&d| !d).collect())
        .collect();
    let (policy, stage) = pi2_stage(
        &states,
        &u_hat,
        &s_tilde,
        if cfg.pi2_eta_on_full_s { Some(&s) } else { None },
        Some(&valid),
        &eps,
        &p_hat,
        cfg,
    )?;

    Ok(UpdateOutcome {
        policy,
        p_hat,
        eps,
        residual_ratio: ratios,
        eta_lqr: lqr.eta.clone(),
        eta_pi2: stage.eta,
        pi2_weights: stage.weights,
        pi2_skipped: stage.skipped,
        lqr,
    })
}

/// Per-iteration diagnostics, one row of the learning curve.
#[derive(Debug, Clone, Copy)]
pub struct IterationReport {
    pub iteration: usize,
    /// Episodes consumed by this iteration.
    pub episodes: usize,
    /// Mean and population standard deviation of the sampled total costs.
    pub mean_cost: f64,
    pub std_cost: f64,
    /// Mean over timesteps of the residual ratio (NaN for the model-free
    /// variant, which has no model).
    pub residual_ratio: f64,
    pub mean_eps: f64,
    /// Mean stage-1 dual variable (NaN for the model-free variant).
    pub mean_eta_lqr: f64,
    /// Mean stage-2 temperature over non-skipped timesteps (NaN for the
    /// model-based variant).
    pub mean_eta_pi2: f64,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn mean_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    mean(&finite)
}

/// Owns one condition's policy and KL schedule and advances them one sampled
/// batch at a time. An iteration either commits completely or — on any
/// numerical failure — leaves every piece of state untouched.
pub struct Optimizer {
    config: PilqrConfig,
    policy: TvlgPolicy,
    eps: Vec<f64>,
    history: VecDeque<RolloutBatch>,
    iteration: usize,
    master_seed: u64,
    condition_id: u64,
}

impl Optimizer {
    /// Fresh optimizer with the standard zero-mean exploration policy.
    pub fn new(
        env: &dyn Environment,
        config: PilqrConfig,
        master_seed: u64,
        condition_id: u64,
    ) -> Result<Self> {
        config.validate()?;
        let policy = TvlgPolicy::zero_mean(
            env.horizon(),
            env.state_dim(),
            env.action_dim(),
            config.init_noise_std,
        );
        Self::with_policy(env, config, policy, master_seed, condition_id)
    }

    /// Optimizer starting from an existing policy (resumed runs, wrappers).
    pub fn with_policy(
        env: &dyn Environment,
        config: PilqrConfig,
        policy: TvlgPolicy,
        master_seed: u64,
        condition_id: u64,
    ) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        if policy.horizon() != env.horizon()
            || policy.state_dim() != env.state_dim()
            || policy.action_dim() != env.action_dim()
        {
            return Err(PilqrError::dim("optimizer: policy does not fit the environment"));
        }
        let eps = vec![config.eps_init; env.horizon()];
        Ok(Optimizer {
            config,
            policy,
            eps,
            history: VecDeque::new(),
            iteration: 0,
            master_seed,
            condition_id,
        })
    }

    pub fn policy(&self) -> &TvlgPolicy {
        &self.policy
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &PilqrConfig {
        &self.config
    }

    /// Runs one iteration: sample, update, commit. See
    /// [`Optimizer::iterate_constrained`] for the trust-region target.
    pub fn iterate(&mut self, env: &dyn Environment) -> Result<IterationReport> {
        self.iterate_constrained(env, None)
    }

    /// One iteration with an explicit trust-region target. `constraint =
    /// None` constrains against the current policy itself; a distillation
    /// wrapper passes the linearized global policy instead.
    pub fn iterate_constrained(
        &mut self,
        env: &dyn Environment,
        constraint: Option<&TvlgPolicy>,
    ) -> Result<IterationReport> {
        let seed = rng::derive(self.master_seed, self.iteration as u64);
        let batch = sample_rollouts(
            env,
            &self.policy,
            self.config.n_rollouts,
            seed,
            self.condition_id,
        )?;
        let mean_cost = batch.mean_cost();
        let std_cost = batch.std_cost();

        let (new_policy, new_eps, report) = match self.config.algorithm {
            Algorithm::Pi2 => {
                let s = cost_to_go(&batch.cost_table());
                let states = batch.states_per_t();
                let controls = batch.actions_per_t();
                let target = constraint.unwrap_or(&self.policy);
                let (policy, stage) = pi2_stage(
                    &states,
                    &controls,
                    &s,
                    None,
                    None,
                    &self.eps,
                    target,
                    &self.config,
                )?;
                let report = IterationReport {
                    iteration: self.iteration,
                    episodes: self.config.n_rollouts,
                    mean_cost,
                    std_cost,
                    residual_ratio: f64::NAN,
                    mean_eps: mean(&self.eps),
                    mean_eta_lqr: f64::NAN,
                    mean_eta_pi2: mean_finite(&stage.eta),
                };
                (policy, self.eps.clone(), report)
            }
            Algorithm::LqrFlm | Algorithm::Pilqr => {
                let mut pool: Vec<RolloutBatch> =
                    self.history.iter().cloned().collect();
                pool.push(batch.clone());
                let dynamics = fit_dynamics_pooled(&pool, self.config.dyn_reg)?;
                let cost = expand_cost(env, &batch)?;
                let target = constraint.unwrap_or(&self.policy);
                let outcome = pilqr_update(
                    &batch,
                    &dynamics,
                    &cost,
                    &self.policy,
                    target,
                    &self.eps,
                    &self.config,
                )?;
                let report = IterationReport {
                    iteration: self.iteration,
                    episodes: self.config.n_rollouts,
                    mean_cost,
                    std_cost,
                    residual_ratio: mean(&outcome.residual_ratio),
                    mean_eps: mean(&outcome.eps),
                    mean_eta_lqr: mean(&outcome.eta_lqr),
                    mean_eta_pi2: mean_finite(&outcome.eta_pi2),
                };
                (outcome.policy, outcome.eps, report)
            }
        };

        // Commit point: nothing above mutated self.
        self.policy = new_policy;
        self.eps = new_eps;
        if self.config.dyn_history > 0 {
            self.history.push_back(batch);
            while self.history.len() > self.config.dyn_history {
                self.history.pop_front();
            }
        }
        self.iteration += 1;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_approx::expand_cost;
    use crate::dyn_fit::{fit_dynamics, FittedDynamics};
    use crate::envs::lq::{LqEnv, LqParams};
    use crate::envs::reacher::{ReacherCondition, ReacherEnv, ReacherParams};
    use crate::rollout::sample_rollouts;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn lq_env(seed: u64, n: usize, m: usize, horizon: usize) -> LqEnv {
        LqEnv::from_params(LqParams::random(n, m, horizon, 0.0, seed)).unwrap()
    }

    fn zero_info_models(
        n: usize,
        m: usize,
        horizon: usize,
    ) -> (FittedDynamics, QuadCostApprox) {
        let dynamics = FittedDynamics {
            f_x: vec![DMatrix::zeros(n, n); horizon - 1],
            f_u: vec![DMatrix::zeros(n, m); horizon - 1],
            f_c: vec![DVector::zeros(n); horizon - 1],
            noise: vec![DMatrix::identity(n, n); horizon - 1],
        };
        let cost = QuadCostApprox {
            x_ref: vec![DVector::zeros(n); horizon],
            u_ref: vec![DVector::zeros(m); horizon],
            c0: vec![0.0; horizon],
            c_x: vec![DVector::zeros(n); horizon],
            c_u: vec![DVector::zeros(m); horizon],
            c_xx: vec![DMatrix::zeros(n, n); horizon],
            c_uu: vec![DMatrix::zeros(m, m); horizon],
            c_xu: vec![DMatrix::zeros(n, m); horizon],
        };
        (dynamics, cost)
    }

    #[test]
    fn shat_equals_true_cost_to_go_when_the_model_is_exact() {
        // Exact linear dynamics + exact quadratic cost: the replay reproduces
        // every sampled trajectory and the model's cost-to-go is the true
        // one.
        let horizon = 20;
        let env = lq_env(61, 3, 2, horizon);
        let policy = TvlgPolicy::zero_mean(horizon, 3, 2, 1.0);
        let batch = sample_rollouts(&env, &policy, 12, 5, 0).unwrap();
        let p = env.params();
        let dynamics = FittedDynamics::exact_linear(
            &p.a,
            &p.b,
            &DMatrix::identity(3, 3) * 1e-8,
            horizon - 1,
        );
        let cost = expand_cost(&env, &batch).unwrap();
        let shat = eval_shat(&batch, &dynamics, &cost, &policy).unwrap();
        let s = cost_to_go(&batch.cost_table());
        for i in 0..batch.len() {
            for t in 0..horizon {
                assert!(!shat.diverged[i][t]);
                assert!(
                    (shat.s_hat[i][t] - s[i][t]).abs() < 1e-8,
                    "S_hat {:.12} vs S {:.12} at ({i},{t})",
                    shat.s_hat[i][t],
                    s[i][t]
                );
            }
        }
    }

    #[test]
    fn shat_at_the_last_timestep_is_the_single_step_cost_model() {
        let horizon = 8;
        let env = lq_env(67, 2, 1, horizon);
        let policy = TvlgPolicy::zero_mean(horizon, 2, 1, 0.7);
        let batch = sample_rollouts(&env, &policy, 5, 11, 0).unwrap();
        let dynamics = fit_dynamics(&batch, 1e-8).unwrap();
        let cost = expand_cost(&env, &batch).unwrap();
        let shat = eval_shat(&batch, &dynamics, &cost, &policy).unwrap();
        for (i, r) in batch.rollouts.iter().enumerate() {
            let expected = cost.eval(horizon - 1, &r.states[horizon - 1], &r.actions[horizon - 1]);
            assert_relative_eq!(shat.s_hat[i][horizon - 1], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn shat_matches_an_independent_reimplementation() {
        // Straight-line re-derivation with raw index loops and no shared
        // helpers, on a nonlinear env with genuinely fitted dynamics.
        let env = ReacherEnv::new(
            ReacherParams {
                horizon: 12,
                ..ReacherParams::default()
            },
            ReacherCondition {
                q0: [0.3, -0.2],
                dq0: [0.0, 0.0],
                target: [1.1, 0.6],
            },
        )
        .unwrap();
        let horizon = 12;
        let policy = TvlgPolicy::zero_mean(horizon, 6, 2, 0.5);
        let batch = sample_rollouts(&env, &policy, 6, 23, 0).unwrap();
        let dynamics = fit_dynamics(&batch, 1e-4).unwrap();
        let cost = expand_cost(&env, &batch).unwrap();
        let shat = eval_shat(&batch, &dynamics, &cost, &policy).unwrap();

        // Reference: plain f64 loops over matrix entries.
        let n = 6;
        let m = 2;
        let mat = |a: &DMatrix<f64>, r: usize, c: usize| a[(r, c)];
        let chols = policy.chol_factors().unwrap();
        for (i, rollout) in batch.rollouts.iter().enumerate() {
            for t in 0..horizon {
                let mut x: Vec<f64> = rollout.states[t].iter().copied().collect();
                let mut total = 0.0;
                for j in t..horizon {
                    let u: Vec<f64> = if j == t {
                        rollout.actions[t].iter().copied().collect()
                    } else {
                        let mut u = vec![0.0; m];
                        for a in 0..m {
                            u[a] += policy.offsets[j][a];
                            for b in 0..n {
                                u[a] += mat(&policy.gains[j], a, b) * x[b];
                            }
                            for b in 0..m {
                                u[a] += mat(&chols[j], a, b) * rollout.xi[j][b];
                            }
                        }
                        u
                    };
                    // Quadratic model value at (x, u), term by term.
                    let mut dx = vec![0.0; n];
                    for b in 0..n {
                        dx[b] = x[b] - cost.x_ref[j][b];
                    }
                    let mut du = vec![0.0; m];
                    for a in 0..m {
                        du[a] = u[a] - cost.u_ref[j][a];
                    }
                    let mut val = cost.c0[j];
                    for b in 0..n {
                        val += cost.c_x[j][b] * dx[b];
                    }
                    for a in 0..m {
                        val += cost.c_u[j][a] * du[a];
                    }
                    for b in 0..n {
                        for c in 0..n {
                            val += 0.5 * dx[b] * mat(&cost.c_xx[j], b, c) * dx[c];
                        }
                    }
                    for a in 0..m {
                        for c in 0..m {
                            val += 0.5 * du[a] * mat(&cost.c_uu[j], a, c) * du[c];
                        }
                    }
                    for b in 0..n {
                        for a in 0..m {
                            val += dx[b] * mat(&cost.c_xu[j], b, a) * du[a];
                        }
                    }
                    total += val;
                    if j + 1 < horizon {
                        let mut next = vec![0.0; n];
                        for r in 0..n {
                            next[r] = dynamics.f_c[j][r];
                            for c in 0..n {
                                next[r] += mat(&dynamics.f_x[j], r, c) * x[c];
                            }
                            for c in 0..m {
                                next[r] += mat(&dynamics.f_u[j], r, c) * u[c];
                            }
                        }
                        x = next;
                    }
                }
                assert!(
                    (shat.s_hat[i][t] - total).abs() <= 1e-10 * total.abs().max(1.0),
                    "mismatch at ({i},{t}): {} vs {total}",
                    shat.s_hat[i][t]
                );
            }
        }
    }

    #[test]
    fn reparametrization_is_identity_under_the_same_policy() {
        let env = lq_env(71, 3, 2, 10);
        let policy = TvlgPolicy::zero_mean(10, 3, 2, 0.9);
        let batch = sample_rollouts(&env, &policy, 8, 31, 0).unwrap();
        let u_hat = reparametrize_controls(&batch, &policy).unwrap();
        for t in 0..10 {
            for (i, r) in batch.rollouts.iter().enumerate() {
                // Bitwise: the exact arithmetic of sampling is replayed.
                assert_eq!(u_hat[t][i], r.actions[t]);
            }
        }
    }

    #[test]
    fn reparametrization_shifts_by_the_offset_delta() {
        let env = lq_env(73, 2, 2, 6);
        let policy = TvlgPolicy::zero_mean(6, 2, 2, 0.8);
        let batch = sample_rollouts(&env, &policy, 5, 37, 0).unwrap();
        let mut shifted = policy.clone();
        let delta = DVector::from_row_slice(&[0.4, -0.9]);
        for t in 0..6 {
            shifted.offsets[t] += &delta;
        }
        let u_hat = reparametrize_controls(&batch, &shifted).unwrap();
        for t in 0..6 {
            for (i, r) in batch.rollouts.iter().enumerate() {
                assert_relative_eq!(u_hat[t][i], &r.actions[t] + &delta, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn eps_adjustment_follows_the_residual_ratio() {
        let cfg = PilqrConfig::default();
        let eps = vec![1.0, 9.0, 0.011];
        // Zero residual: budget doubles, capped at eps_max.
        let doubled = adjust_eps(&eps, &[0.0, 0.0, 0.0], &cfg);
        assert_eq!(doubled, vec![2.0, 10.0, 0.022]);
        // Residual = total: budget halves, floored at eps_min.
        let halved = adjust_eps(&eps, &[1.0, 1.0, 1.0], &cfg);
        assert_eq!(halved, vec![0.5, 4.5, 0.01]);
        // Dead zone: untouched.
        let same = adjust_eps(&eps, &[0.35, 0.35, 0.35], &cfg);
        assert_eq!(same, eps);
    }

    #[test]
    fn two_stage_weight_decomposition_is_exact() {
        // softmax(-(S_hat + S_tilde)/eta) must equal the renormalized product
        // of softmax(-S_hat/eta) and exp(-S_tilde/eta).
        let mut r = crate::rng::stream(79, 0, 0, 0);
        for trial in 0..50 {
            let n = 24;
            let s_hat: Vec<f64> = crate::rng::standard_normal(&mut r, n)
                .iter()
                .map(|v| v * (2.0 + trial as f64 * 0.1))
                .collect();
            let s_tilde: Vec<f64> = crate::rng::standard_normal(&mut r, n)
                .iter()
                .map(|v| v * 0.8)
                .collect();
            let total: Vec<f64> = s_hat.iter().zip(&s_tilde).map(|(a, b)| a + b).collect();
            let eta = 0.9;
            let combined = pi2_weights(&total, eta);
            let staged_first = pi2_weights(&s_hat, eta);
            let tilde_min = s_tilde.iter().cloned().fold(f64::INFINITY, f64::min);
            let product: Vec<f64> = staged_first
                .iter()
                .zip(&s_tilde)
                .map(|(w, st)| w * (-(st - tilde_min) / eta).exp())
                .collect();
            let z: f64 = product.iter().sum();
            for (a, b) in combined.iter().zip(&product) {
                assert!(
                    (a - b / z).abs() < 1e-12,
                    "trial {trial}: {a} vs {}",
                    b / z
                );
            }
        }
    }

    #[test]
    fn zero_information_model_reduces_to_the_pure_path_integral_update() {
        // Force f_x = f_u = 0 and c_hat = 0: S_tilde = S, so the hybrid's
        // stage-2 weights must equal a pure model-free update's weights on
        // the same batch, exactly.
        let horizon = 10;
        let env = lq_env(83, 2, 1, horizon);
        let policy = TvlgPolicy::zero_mean(horizon, 2, 1, 1.0);
        let batch = sample_rollouts(&env, &policy, 15, 41, 0).unwrap();
        let (dynamics, cost) = zero_info_models(2, 1, horizon);
        let cfg = PilqrConfig::default();
        let eps_prev = vec![1.0; horizon];
        let outcome =
            pilqr_update(&batch, &dynamics, &cost, &policy, &policy, &eps_prev, &cfg).unwrap();

        // Pure update on raw costs-to-go with the budgets the hybrid used.
        let s = cost_to_go(&batch.cost_table());
        let states = batch.states_per_t();
        let controls = batch.actions_per_t();
        let (_pure_policy, stage) = pi2_stage(
            &states,
            &controls,
            &s,
            None,
            None,
            &outcome.eps,
            &policy,
            &cfg,
        )
        .unwrap();

        for t in 0..horizon {
            assert!(!outcome.pi2_skipped[t]);
            for i in 0..batch.len() {
                assert!(
                    (outcome.pi2_weights[t][i] - stage.weights[t][i]).abs() < 1e-12,
                    "weight mismatch at (t={t}, i={i})"
                );
            }
        }
        // The model explained nothing: every budget must have shrunk.
        for (e_new, e_old) in outcome.eps.iter().zip(&eps_prev) {
            assert!(e_new < e_old);
        }
    }

    #[test]
    fn exact_model_makes_stage_two_a_near_no_op() {
        // On the LQ env with an exact model the residual ratio collapses and
        // stage-2 weights are uniform to high precision.
        let horizon = 15;
        let env = lq_env(89, 3, 2, horizon);
        let policy = TvlgPolicy::zero_mean(horizon, 3, 2, 1.0);
        let batch = sample_rollouts(&env, &policy, 10, 43, 0).unwrap();
        let p = env.params();
        let dynamics = FittedDynamics::exact_linear(
            &p.a,
            &p.b,
            &DMatrix::identity(3, 3) * 1e-8,
            horizon - 1,
        );
        let cost = expand_cost(&env, &batch).unwrap();
        let cfg = PilqrConfig::default();
        let outcome =
            pilqr_update(&batch, &dynamics, &cost, &policy, &policy, &vec![1.0; horizon], &cfg)
                .unwrap();
        let uniform = 1.0 / batch.len() as f64;
        for t in 0..horizon {
            assert!(outcome.residual_ratio[t] < 1e-6);
            for i in 0..batch.len() {
                assert_relative_eq!(outcome.pi2_weights[t][i], uniform, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn iterations_are_deterministic_given_the_seed() {
        let env = lq_env(97, 2, 2, 12);
        let cfg = PilqrConfig {
            n_rollouts: 8,
            ..PilqrConfig::default()
        };
        let run = || -> (Vec<IterationReport>, TvlgPolicy) {
            let mut opt = Optimizer::new(&env, cfg.clone(), 2024, 3).unwrap();
            let reports = (0..3).map(|_| opt.iterate(&env).unwrap()).collect();
            (reports, opt.policy().clone())
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.mean_cost.to_bits(), b.mean_cost.to_bits());
            assert_eq!(a.std_cost.to_bits(), b.std_cost.to_bits());
            assert_eq!(a.mean_eps.to_bits(), b.mean_eps.to_bits());
        }
        for t in 0..12 {
            assert_eq!(p1.gains[t], p2.gains[t]);
            assert_eq!(p1.covariances[t], p2.covariances[t]);
        }
    }

    #[test]
    fn failed_iteration_leaves_the_optimizer_untouched() {
        // Two rollouts cannot identify a 3+2+1-column dynamics regression
        // with reg = 0: the fit fails and the commit must not happen.
        let env = lq_env(101, 3, 2, 8);
        let cfg = PilqrConfig {
            n_rollouts: 2,
            dyn_reg: 0.0,
            ..PilqrConfig::default()
        };
        let mut opt = Optimizer::new(&env, cfg, 77, 0).unwrap();
        let policy_before = opt.policy().clone();
        let eps_before = opt.eps().to_vec();
        let err = opt.iterate(&env);
        assert!(err.is_err());
        assert_eq!(opt.iteration(), 0);
        assert_eq!(opt.eps(), &eps_before[..]);
        for t in 0..8 {
            assert_eq!(opt.policy().gains[t], policy_before.gains[t]);
        }
    }

    #[test]
    fn model_free_iterations_improve_a_two_step_decision_task() {
        // Bandit-like check: 1-D LQ with T=2 (one decision that matters).
        // The closed-form expected cost must be nonincreasing across
        // iterations for nearly every seed.
        let params = LqParams {
            a: DMatrix::from_row_slice(1, 1, &[1.0]),
            b: DMatrix::from_row_slice(1, 1, &[1.0]),
            q: DMatrix::from_row_slice(1, 1, &[1.0]),
            r: DMatrix::from_row_slice(1, 1, &[0.1]),
            x0: DVector::from_row_slice(&[1.0]),
            horizon: 2,
            process_noise_std: 0.0,
        };
        let env = LqEnv::from_params(params).unwrap();
        let cfg = PilqrConfig {
            algorithm: Algorithm::Pi2,
            n_rollouts: 40,
            eps_init: 2.0,
            ..PilqrConfig::default()
        };
        // E[cost] of a policy on this problem, exactly: costs are
        // 0.5 q x0^2 + 0.5 r u0^2 at t=0 and 0.5 q x1^2 + 0.5 r u1^2 at t=1.
        let expected_cost = |p: &TvlgPolicy| -> f64 {
            let x0 = 1.0;
            let (k0, b0, s0) = (p.gains[0][(0, 0)], p.offsets[0][0], p.covariances[0][(0, 0)]);
            let (k1, b1, s1) = (p.gains[1][(0, 0)], p.offsets[1][0], p.covariances[1][(0, 0)]);
            let u0_mean = k0 * x0 + b0;
            let c0 = 0.5 * x0 * x0 + 0.05 * (u0_mean * u0_mean + s0);
            // x1 = x0 + u0 => E[x1^2] = (x0 + u0_mean)^2 + s0.
            let x1_mean = x0 + u0_mean;
            let ex1sq = x1_mean * x1_mean + s0;
            // u1 = k1 x1 + b1 + noise => E[u1^2] = k1^2 E[x1^2]
            //   + 2 k1 x1_mean b1 + b1^2 + s1.
            let eu1sq = k1 * k1 * ex1sq + 2.0 * k1 * x1_mean * b1 + b1 * b1 + s1;
            c0 + 0.5 * ex1sq + 0.05 * eu1sq
        };
        let mut good = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut opt = Optimizer::new(&env, cfg.clone(), 5000 + seed, 0).unwrap();
            let mut costs = vec![expected_cost(opt.policy())];
            for _ in 0..10 {
                opt.iterate(&env).unwrap();
                costs.push(expected_cost(opt.policy()));
            }
            if costs.windows(2).all(|w| w[1] <= w[0] + 1e-9) {
                good += 1;
            }
        }
        assert!(
            good * 100 >= seeds * 95,
            "only {good}/{seeds} seeds were monotone"
        );
    }

    #[test]
    fn hybrid_beats_its_starting_policy_on_the_reacher() {
        // Full-pipeline smoke test on a nonlinear env: mean cost after five
        // iterations is below the initial exploration policy's.
        let env = ReacherEnv::new(
            ReacherParams {
                horizon: 30,
                ..ReacherParams::default()
            },
            ReacherCondition {
                q0: [0.2, 0.1],
                dq0: [0.0, 0.0],
                target: [1.0, 1.0],
            },
        )
        .unwrap();
        let cfg = PilqrConfig {
            n_rollouts: 15,
            init_noise_std: 0.5,
            ..PilqrConfig::default()
        };
        let mut opt = Optimizer::new(&env, cfg, 31415, 0).unwrap();
        let first = opt.iterate(&env).unwrap();
        let mut last = first;
        for _ in 0..4 {
            last = opt.iterate(&env).unwrap();
        }
        assert!(
            last.mean_cost < first.mean_cost,
            "no improvement: {:.4} -> {:.4}",
            first.mean_cost,
            last.mean_cost
        );
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = PilqrConfig::default();
        cfg.n_rollouts = 1;
        assert!(cfg.validate().is_err());
        cfg = PilqrConfig::default();
        cfg.eps_init = 100.0;
        assert!(cfg.validate().is_err());
        cfg = PilqrConfig::default();
        cfg.ratio_lo = 0.6;
        assert!(cfg.validate().is_err());
        cfg = PilqrConfig::default();
        cfg.cov_damping = 0.0;
        assert!(cfg.validate().is_err());
        cfg = PilqrConfig::default();
        cfg.pi2_eps_override = Some(-1.0);
        assert!(cfg.validate().is_err());
        assert!(PilqrConfig::default().validate().is_ok());
    }
}
