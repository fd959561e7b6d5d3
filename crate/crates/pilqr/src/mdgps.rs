//! Distilling per-condition local policies into one global parametric
//! policy (mirror-descent guided policy search).
//!
//! Each iteration alternates two supervised-style steps:
//!
//! 1. every condition's local time-varying linear-Gaussian policy takes one
//!    hybrid update, but with its KL trust region measured against the
//!    current global policy — linearized around that condition's fresh batch
//!    states so the constraint stays a conditional-Gaussian KL the local
//!    solvers understand;
//! 2. the global policy is refit by precision-weighted regression onto the
//!    updated local policies' mean actions at the sampled states.
//!
//! Covariance handling: the global policy carries no covariance of its own.
//! Where one is needed — the linearized constraint target, and the precision
//! weights of the regression — we take the local policy's current `Sigma_t`
//! (diagonal part). This keeps the constraint focused on pulling the means
//! together while exploration schedules stay per-condition.

use crate::envs::Environment;
use crate::error::{PilqrError, Result};
use crate::linalg;
use crate::pilqr::{pilqr_update, Algorithm, IterationReport, PilqrConfig};
use crate::pi2::cost_to_go;
use crate::policy::TvlgPolicy;
use crate::rng;
use crate::rollout::sample_rollouts;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Architecture of the global policy's mean function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `u = K x + k`.
    Affine,
    /// Two hidden layers of rectified linear units, linear output.
    Mlp { hidden: usize },
}

/// Deterministic parametric policy `x -> mean action`, parameters stored as
/// one flat vector (checkpointable as JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalPolicy {
    pub arch: Architecture,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Flat parameter vector; layout fixed by `arch` (row-major weight
    /// matrices in layer order, each followed by its bias).
    pub theta: Vec<f64>,
}

impl GlobalPolicy {
    /// Zero-initialized affine policy (`K = 0`, `k = 0`).
    pub fn affine(state_dim: usize, action_dim: usize) -> Self {
        GlobalPolicy {
            arch: Architecture::Affine,
            state_dim,
            action_dim,
            theta: vec![0.0; action_dim * state_dim + action_dim],
        }
    }

    /// Two-hidden-layer rectified-unit network with deterministic scaled
    /// Gaussian weight init and zero biases.
    pub fn mlp(state_dim: usize, action_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(PilqrError::config("global policy: hidden width must be positive"));
        }
        let shapes = [
            (hidden, state_dim),
            (hidden, hidden),
            (action_dim, hidden),
        ];
        let mut theta = Vec::new();
        for (layer, &(rows, cols)) in shapes.iter().enumerate() {
            let mut r = rng::stream(rng::derive(seed, layer as u64), 0, 0, 0);
            let scale = (2.0 / cols as f64).sqrt();
            let w = rng::standard_normal(&mut r, rows * cols);
            theta.extend(w.iter().map(|v| v * scale));
            theta.extend(std::iter::repeat(0.0).take(rows));
        }
        Ok(GlobalPolicy {
            arch: Architecture::Mlp { hidden },
            state_dim,
            action_dim,
            theta,
        })
    }

    pub fn n_params(&self) -> usize {
        match self.arch {
            Architecture::Affine => self.action_dim * (self.state_dim + 1),
            Architecture::Mlp { hidden } => {
                hidden * (self.state_dim + 1)
                    + hidden * (hidden + 1)
                    + self.action_dim * (hidden + 1)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(PilqrError::config("global policy: zero dimensions"));
        }
        if self.theta.len() != self.n_params() {
            return Err(PilqrError::config(format!(
                "global policy: theta has {} entries, architecture needs {}",
                self.theta.len(),
                self.n_params()
            )));
        }
        if !self.theta.iter().all(|v| v.is_finite()) {
            return Err(PilqrError::config("global policy: non-finite parameters"));
        }
        Ok(())
    }

    /// Mean action at a state.
    pub fn mean_action(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.arch {
            Architecture::Affine => {
                let (m, n) = (self.action_dim, self.state_dim);
                let mut u = DVector::zeros(m);
                for a in 0..m {
                    let mut v = self.theta[m * n + a];
                    for b in 0..n {
                        v += self.theta[a * n + b] * x[b];
                    }
                    u[a] = v;
                }
                u
            }
            Architecture::Mlp { .. } => self.forward(x).output,
        }
    }

    /// Forward pass with cached activations (for backprop).
    fn forward(&self, x: &DVector<f64>) -> MlpActivations {
        let hidden = match self.arch {
            Architecture::Mlp { hidden } => hidden,
            Architecture::Affine => unreachable!("forward is MLP-only"),
        };
        let (w1, b1, w2, b2, w3, b3) = self.mlp_slices(hidden);
        let affine = |w: &[f64], b: &[f64], rows: usize, cols: usize, v: &DVector<f64>| {
            DVector::from_fn(rows, |r, _| {
                let mut s = b[r];
                for c in 0..cols {
                    s += w[r * cols + c] * v[c];
                }
                s
            })
        };
        let z1 = affine(w1, b1, hidden, self.state_dim, x);
        let a1 = z1.map(|v| v.max(0.0));
        let z2 = affine(w2, b2, hidden, hidden, &a1);
        let a2 = z2.map(|v| v.max(0.0));
        let output = affine(w3, b3, self.action_dim, hidden, &a2);
        MlpActivations { z1, a1, z2, a2, output }
    }

    fn mlp_slices(&self, hidden: usize) -> (&[f64], &[f64], &[f64], &[f64], &[f64], &[f64]) {
        let n = self.state_dim;
        let m = self.action_dim;
        let t = &self.theta;
        let w1_end = hidden * n;
        let b1_end = w1_end + hidden;
        let w2_end = b1_end + hidden * hidden;
        let b2_end = w2_end + hidden;
        let w3_end = b2_end + m * hidden;
        let b3_end = w3_end + m;
        (
            &t[..w1_end],
            &t[w1_end..b1_end],
            &t[b1_end..w2_end],
            &t[w2_end..b2_end],
            &t[b2_end..w3_end],
            &t[w3_end..b3_end],
        )
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: GlobalPolicy = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

struct MlpActivations {
    z1: DVector<f64>,
    a1: DVector<f64>,
    z2: DVector<f64>,
    a2: DVector<f64>,
    output: DVector<f64>,
}

/// One supervised sample: where the local policy was, what it would do
/// there, and how certain it is per action dimension (inverse variance).
#[derive(Debug, Clone)]
pub struct Supervision {
    pub state: DVector<f64>,
    pub action: DVector<f64>,
    /// Diagonal precision; a zero entry removes that dimension from the
    /// loss, an all-zero vector removes the sample.
    pub precision: DVector<f64>,
}

/// Precision-weighted mean squared error of the policy on the dataset,
/// averaged over samples that carry any weight.
pub fn global_loss(policy: &GlobalPolicy, data: &[Supervision]) -> f64 {
    let used: Vec<&Supervision> = data
        .iter()
        .filter(|s| s.precision.iter().any(|&p| p > 0.0))
        .collect();
    if used.is_empty() {
        return 0.0;
    }
    let total: f64 = used
        .iter()
        .map(|s| {
            let e = policy.mean_action(&s.state) - &s.action;
            e.iter()
                .zip(s.precision.iter())
                .map(|(ei, pi)| pi * ei * ei)
                .sum::<f64>()
        })
        .sum();
    total / used.len() as f64
}

fn global_gradient(policy: &GlobalPolicy, data: &[Supervision]) -> DVector<f64> {
    let used: Vec<&Supervision> = data
        .iter()
        .filter(|s| s.precision.iter().any(|&p| p > 0.0))
        .collect();
    let mut grad = DVector::zeros(policy.theta.len());
    if used.is_empty() {
        return grad;
    }
    let scale = 1.0 / used.len() as f64;
    let n = policy.state_dim;
    let m = policy.action_dim;
    for s in used {
        match policy.arch {
            Architecture::Affine => {
                let e = policy.mean_action(&s.state) - &s.action;
                for a in 0..m {
                    let g_out = 2.0 * s.precision[a] * e[a] * scale;
                    for b in 0..n {
                        grad[a * n + b] += g_out * s.state[b];
                    }
                    grad[m * n + a] += g_out;
                }
            }
            Architecture::Mlp { hidden } => {
                let act = policy.forward(&s.state);
                let (w2_off, w3_off) = (
                    hidden * n + hidden,
                    hidden * n + hidden + hidden * hidden + hidden,
                );
                let b3_off = w3_off + m * hidden;
                // dL/dy, then back through the two rectified layers.
                let d_out = DVector::from_fn(m, |a, _| {
                    2.0 * s.precision[a] * (act.output[a] - s.action[a]) * scale
                });
                let w3 = &policy.theta[w3_off..w3_off + m * hidden];
                let mut d_a2 = DVector::zeros(hidden);
                for a in 0..m {
                    for h in 0..hidden {
                        grad[w3_off + a * hidden + h] += d_out[a] * act.a2[h];
                        d_a2[h] += w3[a * hidden + h] * d_out[a];
                    }
                    grad[b3_off + a] += d_out[a];
                }
                let d_z2 = DVector::from_fn(hidden, |h, _| {
                    if act.z2[h] > 0.0 { d_a2[h] } else { 0.0 }
                });
                let w2 = &policy.theta[w2_off..w2_off + hidden * hidden];
                let b2_off = w2_off + hidden * hidden;
                let mut d_a1 = DVector::zeros(hidden);
                for r in 0..hidden {
                    for c in 0..hidden {
                        grad[w2_off + r * hidden + c] += d_z2[r] * act.a1[c];
                        d_a1[c] += w2[r * hidden + c] * d_z2[r];
                    }
                    grad[b2_off + r] += d_z2[r];
                }
                let d_z1 = DVector::from_fn(hidden, |h, _| {
                    if act.z1[h] > 0.0 { d_a1[h] } else { 0.0 }
                });
                let b1_off = hidden * n;
                for r in 0..hidden {
                    for c in 0..n {
                        grad[r * n + c] += d_z1[r] * s.state[c];
                    }
                    grad[b1_off + r] += d_z1[r];
                }
            }
        }
    }
    grad
}

/// Settings of the supervised fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Step halvings allowed per epoch before giving up on progress.
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 200,
            learning_rate: 1e-2,
            max_halvings: 40,
        }
    }
}

/// Fits the global policy to the dataset by full-batch gradient descent with
/// step halving, so the reported loss sequence is nonincreasing. Returns the
/// updated policy and the loss after each accepted epoch (index 0 is the
/// starting loss).
pub fn fit_global(
    policy: &GlobalPolicy,
    data: &[Supervision],
    opts: &FitOptions,
) -> Result<(GlobalPolicy, Vec<f64>)> {
    policy.validate()?;
    for s in data {
        if s.state.len() != policy.state_dim
            || s.action.len() != policy.action_dim
            || s.precision.len() != policy.action_dim
        {
            return Err(PilqrError::dim("fit_global: sample dimensions do not match policy"));
        }
        if s.precision.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(PilqrError::config("fit_global: precisions must be finite and nonnegative"));
        }
    }
    let mut fitted = policy.clone();
    let mut losses = vec![global_loss(&fitted, data)];
    if !losses[0].is_finite() {
        return Err(PilqrError::Numerical {
            context: "fit_global",
            t: 0,
            msg: format!("starting loss is not finite ({})", losses[0]),
        });
    }
    let mut lr = opts.learning_rate;
    for epoch in 0..opts.epochs {
        let grad = global_gradient(&fitted, data);
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(PilqrError::Numerical {
                context: "fit_global",
                t: epoch,
                msg: "non-finite gradient".to_string(),
            });
        }
        if gnorm == 0.0 {
            break;
        }
        let current = *losses.last().expect("loss history is never empty");
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let mut candidate = fitted.clone();
            for (c, g) in candidate.theta.iter_mut().zip(grad.iter()) {
                *c -= lr * g;
            }
            let loss = global_loss(&candidate, data);
            if !loss.is_finite() {
                lr *= 0.5;
                continue;
            }
            if loss <= current {
                fitted = candidate;
                losses.push(loss);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            // No descent step at any tried scale: converged to tolerance.
            break;
        }
    }
    Ok((fitted, losses))
}

/// Affine fit of the global policy's mean around the given states:
/// regression of `pi(x)` on `[x; 1]`. Starts with an exact normal-equation
/// solve and falls back to increasing ridge regularization when the states
/// are degenerate.
pub fn linearize_global(
    policy: &GlobalPolicy,
    states: &[DVector<f64>],
    reg: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if states.is_empty() {
        return Err(PilqrError::dim("linearize_global: no states"));
    }
    let n = policy.state_dim;
    let m = policy.action_dim;
    let rows = states.len();
    let mut design = DMatrix::zeros(rows, n + 1);
    let mut target = DMatrix::zeros(rows, m);
    for (r, x) in states.iter().enumerate() {
        if x.len() != n {
            return Err(PilqrError::dim("linearize_global: state dimension mismatch"));
        }
        design.view_mut((r, 0), (1, n)).copy_from(&x.transpose());
        design[(r, n)] = 1.0;
        let u = policy.mean_action(x);
        target.view_mut((r, 0), (1, m)).copy_from(&u.transpose());
    }
    let weights = vec![1.0; rows];
    let mut attempt = reg;
    for _ in 0..6 {
        if let Some(coef) = linalg::ridge_regression(&design, &target, &weights, attempt) {
            let k_mat = coef.rows(0, n).transpose();
            let k_vec = coef.row(n).transpose();
            return Ok((k_mat, k_vec));
        }
        attempt = (attempt * 1e3).max(1e-10);
    }
    Err(PilqrError::Singular {
        context: "linearize_global",
        t: 0,
    })
}

/// Linearizes the global policy at every timestep's batch states and wraps
/// the result as a TVLG policy usable as a KL constraint target. The
/// covariance at `t` is the diagonal of the local policy's `Sigma_t`.
pub fn linearized_constraint(
    policy: &GlobalPolicy,
    states_per_t: &[Vec<DVector<f64>>],
    local: &TvlgPolicy,
    reg: f64,
) -> Result<TvlgPolicy> {
    if states_per_t.len() != local.horizon() {
        return Err(PilqrError::dim(
            "linearized_constraint: state table does not cover the horizon",
        ));
    }
    let m = local.action_dim();
    let mut gains = Vec::with_capacity(local.horizon());
    let mut offsets = Vec::with_capacity(local.horizon());
    let mut covariances = Vec::with_capacity(local.horizon());
    for (t, states) in states_per_t.iter().enumerate() {
        let (k_mat, k_vec) = linearize_global(policy, states, reg)?;
        gains.push(k_mat);
        offsets.push(k_vec);
        covariances.push(DMatrix::from_fn(m, m, |r, c| {
            if r == c {
                local.covariances[t][(r, r)]
            } else {
                0.0
            }
        }));
    }
    let constraint = TvlgPolicy {
        gains,
        offsets,
        covariances,
    };
    constraint.validate()?;
    Ok(constraint)
}

/// MDGPS settings: the per-condition local update plus the supervised fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdgpsConfig {
    pub local: PilqrConfig,
    pub fit: FitOptions,
    /// Architecture of the global policy.
    pub arch: Architecture,
    /// Ridge used when linearizing the global policy (0 = exact solve with
    /// automatic fallback).
    pub lin_reg: f64,
}

impl Default for MdgpsConfig {
    fn default() -> Self {
        MdgpsConfig {
            local: PilqrConfig::default(),
            fit: FitOptions::default(),
            arch: Architecture::Affine,
            lin_reg: 0.0,
        }
    }
}

impl MdgpsConfig {
    pub fn validate(&self) -> Result<()> {
        self.local.validate()?;
        if self.fit.epochs == 0 || !(self.fit.learning_rate > 0.0) {
            return Err(PilqrError::config("mdgps: fit needs epochs > 0 and a positive learning rate"));
        }
        if !(self.lin_reg >= 0.0) {
            return Err(PilqrError::config("mdgps: lin_reg must be nonnegative"));
        }
        if let Architecture::Mlp { hidden } = self.arch {
            if hidden == 0 {
                return Err(PilqrError::config("mdgps: hidden width must be positive"));
            }
        }
        Ok(())
    }
}

/// What one MDGPS iteration reports.
#[derive(Debug, Clone)]
pub struct MdgpsReport {
    /// Per-condition local-update diagnostics.
    pub per_condition: Vec<IterationReport>,
    /// Supervised loss before and after the global refit.
    pub fit_loss_initial: f64,
    pub fit_loss_final: f64,
}

/// One full iteration: per condition, a local update trust-regioned against
/// the linearized global policy; then a global refit on the new local means.
///
/// Pure with respect to its inputs — returns the new locals, the new KL
/// schedules, the new global policy, and diagnostics.
pub fn mdgps_iteration(
    envs: &[&dyn Environment],
    locals: &[TvlgPolicy],
    eps: &[Vec<f64>],
    global: &GlobalPolicy,
    config: &MdgpsConfig,
    seed: u64,
) -> Result<(Vec<TvlgPolicy>, Vec<Vec<f64>>, GlobalPolicy, MdgpsReport)> {
    config.validate()?;
    global.validate()?;
    if envs.is_empty() || envs.len() != locals.len() || envs.len() != eps.len() {
        return Err(PilqrError::dim(
            "mdgps_iteration: need one env, local policy and KL schedule per condition",
        ));
    }

    struct ConditionOutcome {
        policy: TvlgPolicy,
        eps: Vec<f64>,
        report: IterationReport,
        data: Vec<Supervision>,
    }

    let outcomes: Vec<Result<ConditionOutcome>> = envs
        .par_iter()
        .enumerate()
        .map(|(c, env)| {
            let local = &locals[c];
            let batch = sample_rollouts(
                *env,
                local,
                config.local.n_rollouts,
                rng::derive(seed, c as u64),
                c as u64,
            )?;
            let states = batch.states_per_t();
            let constraint = linearized_constraint(global, &states, local, config.lin_reg)?;

            let (policy, eps_used, report) = match config.local.algorithm {
                Algorithm::Pi2 => {
                    let s = cost_to_go(&batch.cost_table());
                    let controls = batch.actions_per_t();
                    let (policy, stage) = crate::pilqr::pi2_stage(
                        &states,
                        &controls,
                        &s,
                        None,
                        None,
                        &eps[c],
                        &constraint,
                        &config.local,
                    )?;
                    let report = IterationReport {
                        iteration: 0,
                        episodes: config.local.n_rollouts,
                        mean_cost: batch.mean_cost(),
                        std_cost: batch.std_cost(),
                        residual_ratio: f64::NAN,
                        mean_eps: eps[c].iter().sum::<f64>() / eps[c].len() as f64,
                        mean_eta_lqr: f64::NAN,
                        mean_eta_pi2: {
                            let finite: Vec<f64> =
                                stage.eta.iter().copied().filter(|v| v.is_finite()).collect();
                            if finite.is_empty() {
                                f64::NAN
                            } else {
                                finite.iter().sum::<f64>() / finite.len() as f64
                            }
                        },
                    };
                    (policy, eps[c].clone(), report)
                }
                Algorithm::LqrFlm | Algorithm::Pilqr => {
                    let dynamics =
                        crate::dyn_fit::fit_dynamics(&batch, config.local.dyn_reg)?;
                    let cost = crate::cost_approx::expand_cost(*env, &batch)?;
                    let outcome = pilqr_update(
                        &batch,
                        &dynamics,
                        &cost,
                        local,
                        &constraint,
                        &eps[c],
                        &config.local,
                    )?;
                    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                    let finite_mean = |v: &[f64]| {
                        let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
                        if f.is_empty() {
                            f64::NAN
                        } else {
                            mean(&f)
                        }
                    };
                    let report = IterationReport {
                        iteration: 0,
                        episodes: config.local.n_rollouts,
                        mean_cost: batch.mean_cost(),
                        std_cost: batch.std_cost(),
                        residual_ratio: mean(&outcome.residual_ratio),
                        mean_eps: mean(&outcome.eps),
                        mean_eta_lqr: mean(&outcome.eta_lqr),
                        mean_eta_pi2: finite_mean(&outcome.eta_pi2),
                    };
                    (outcome.policy, outcome.eps, report)
                }
            };

            // Supervision: the new local policy's mean action at every
            // sampled state, weighted by its (diagonal) precision there.
            let mut data = Vec::new();
            for (t, states_t) in states.iter().enumerate() {
                let prec = DVector::from_fn(policy.action_dim(), |d, _| {
                    1.0 / policy.covariances[t][(d, d)].max(1e-12)
                });
                for x in states_t {
                    data.push(Supervision {
                        state: x.clone(),
                        action: policy.mean_action(t, x),
                        precision: prec.clone(),
                    });
                }
            }
            Ok(ConditionOutcome {
                policy,
                eps: eps_used,
                report,
                data,
            })
        })
        .collect();

    let mut new_locals = Vec::with_capacity(envs.len());
    let mut new_eps = Vec::with_capacity(envs.len());
    let mut reports = Vec::with_capacity(envs.len());
    let mut dataset = Vec::new();
    for outcome in outcomes {
        let o = outcome?;
        new_locals.push(o.policy);
        new_eps.push(o.eps);
        reports.push(o.report);
        dataset.extend(o.data);
    }

    let (new_global, losses) = fit_global(global, &dataset, &config.fit)?;
    let report = MdgpsReport {
        per_condition: reports,
        fit_loss_initial: *losses.first().expect("loss history is never empty"),
        fit_loss_final: *losses.last().expect("loss history is never empty"),
    };
    Ok((new_locals, new_eps, new_global, report))
}

/// Stateful driver over [`mdgps_iteration`]: owns the locals, the global,
/// and the per-condition KL schedules.
pub struct MdgpsRunner {
    config: MdgpsConfig,
    locals: Vec<TvlgPolicy>,
    eps: Vec<Vec<f64>>,
    global: GlobalPolicy,
    iteration: usize,
    master_seed: u64,
}

impl MdgpsRunner {
    pub fn new(envs: &[&dyn Environment], config: MdgpsConfig, master_seed: u64) -> Result<Self> {
        config.validate()?;
        if envs.is_empty() {
            return Err(PilqrError::config("mdgps: need at least one condition"));
        }
        let n = envs[0].state_dim();
        let m = envs[0].action_dim();
        let horizon = envs[0].horizon();
        for env in envs {
            if env.state_dim() != n || env.action_dim() != m || env.horizon() != horizon {
                return Err(PilqrError::dim(
                    "mdgps: all conditions must share dimensions and horizon",
                ));
            }
        }
        let locals = envs
            .iter()
            .map(|e| {
                TvlgPolicy::zero_mean(
                    e.horizon(),
                    e.state_dim(),
                    e.action_dim(),
                    config.local.init_noise_std,
                )
            })
            .collect();
        let eps = envs
            .iter()
            .map(|e| vec![config.local.eps_init; e.horizon()])
            .collect();
        let global = match config.arch {
            Architecture::Affine => GlobalPolicy::affine(n, m),
            Architecture::Mlp { hidden } => {
                GlobalPolicy::mlp(n, m, hidden, rng::derive(master_seed, u64::MAX))?
            }
        };
        Ok(MdgpsRunner {
            config,
            locals,
            eps,
            global,
            iteration: 0,
            master_seed,
        })
    }

    pub fn locals(&self) -> &[TvlgPolicy] {
        &self.locals
    }

    pub fn global(&self) -> &GlobalPolicy {
        &self.global
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One iteration over all conditions; commits only on full success.
    pub fn iterate(&mut self, envs: &[&dyn Environment]) -> Result<MdgpsReport> {
        let seed = rng::derive(self.master_seed, self.iteration as u64);
        let (locals, eps, global, mut report) = mdgps_iteration(
            envs,
            &self.locals,
            &self.eps,
            &self.global,
            &self.config,
            seed,
        )?;
        self.locals = locals;
        self.eps = eps;
        self.global = global;
        for r in &mut report.per_condition {
            r.iteration = self.iteration;
        }
        self.iteration += 1;
        Ok(report)
    }
}

/// Rolls the global policy's mean deterministically through an environment;
/// returns the total cost and the visited states.
pub fn evaluate_global(
    env: &dyn Environment,
    policy: &GlobalPolicy,
) -> Result<(f64, Vec<DVector<f64>>)> {
    if policy.state_dim != env.state_dim() || policy.action_dim != env.action_dim() {
        return Err(PilqrError::dim("evaluate_global: policy does not fit the environment"));
    }
    let horizon = env.horizon();
    let mut states = Vec::with_capacity(horizon);
    let mut x = env.initial_state();
    let mut total = 0.0;
    for t in 0..horizon {
        let u = policy.mean_action(&x);
        total += env.cost_value(&x, &u, t);
        states.push(x.clone());
        if t + 1 < horizon {
            x = env.step(&x, &u, t);
        }
    }
    Ok((total, states))
}
