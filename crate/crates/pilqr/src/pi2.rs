//! KL-constrained path-integral update (PI2).
//!
//! Per timestep, rollouts are scored by their cost-to-go `S_it` (suffix sum of
//! step costs), converted to weights `w_i ∝ exp(-S_it / eta_t)`, and the TVLG
//! policy is refit by weighted maximum likelihood. The temperature `eta_t` is
//! not a free parameter: it is the dual variable of the KL constraint
//! `KL(p_new || p_old) <= eps`, found by minimizing the convex dual
//!
//! `g(eta) = eta * eps + eta * log( (1/N) sum_i exp(-S_it / eta) )`.
//!
//! Small `eta` concentrates the weights on the best rollouts; the constraint
//! stops that exactly when the implied update would leave the trust region.

use crate::error::{PilqrError, Result};
use crate::linalg;
use crate::policy::TvlgPolicy;
use nalgebra::{DMatrix, DVector};

/// Bracket for the dual temperature, shared with the LQR-FLM dual.
pub const ETA_MIN: f64 = 1e-6;
pub const ETA_MAX: f64 = 1e6;

/// Spread below which a score vector counts as "all equal" (relative to its
/// magnitude): the dual is then flat and the weights uniform at any eta.
const DEGENERATE_SPREAD: f64 = 1e-12;

/// Per-rollout costs-to-go: `S[i][t] = sum_{j >= t} costs[i][j]`.
pub fn cost_to_go(costs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    costs
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            let mut out = vec![0.0; row.len()];
            for t in (0..row.len()).rev() {
                acc += row[t];
                out[t] = acc;
            }
            out
        })
        .collect()
}

/// Dual objective `g(eta)` for scores `s` and KL budget `eps`. Evaluated in a
/// max-shifted form so it is finite for any positive `eta`.
pub fn dual_value(s: &[f64], eps: f64, eta: f64) -> f64 {
    let s_min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_exp: f64 =
        s.iter().map(|&si| (-(si - s_min) / eta).exp()).sum::<f64>() / s.len() as f64;
    eta * eps - s_min + eta * mean_exp.ln()
}

#[derive(Debug, Clone, Copy)]
pub struct DualSolution {
    pub eta: f64,
    /// Dual objective at `eta`.
    pub value: f64,
    pub at_lower: bool,
    pub at_upper: bool,
    /// All scores equal (to relative spread 1e-12): weights are uniform for
    /// every eta and the returned eta is the upper bracket end by convention.
    pub degenerate: bool,
}

/// Minimizes the dual over `eta in [ETA_MIN, ETA_MAX]` by golden-section
/// search in log space (the dual is convex in `eta`, hence unimodal in
/// `log eta`).
pub fn dual_eta(s: &[f64], eps: f64) -> Result<DualSolution> {
    if s.len() < 2 {
        return Err(PilqrError::config("dual_eta: need at least two scores"));
    }
    if !(eps > 0.0) {
        return Err(PilqrError::config("dual_eta: eps must be positive"));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(PilqrError::config("dual_eta: scores must be finite"));
    }
    let s_max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s_min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = s_max.abs().max(s_min.abs()).max(1.0);
    if s_max - s_min <= DEGENERATE_SPREAD * scale {
        return Ok(DualSolution {
            eta: ETA_MAX,
            value: dual_value(s, eps, ETA_MAX),
            at_lower: false,
            at_upper: true,
            degenerate: true,
        });
    }

    let golden = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = ETA_MIN.ln();
    let mut b = ETA_MAX.ln();
    let mut c = b - golden * (b - a);
    let mut d = a + golden * (b - a);
    let mut fc = dual_value(s, eps, c.exp());
    let mut fd = dual_value(s, eps, d.exp());
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - golden * (b - a);
            fc = dual_value(s, eps, c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + golden * (b - a);
            fd = dual_value(s, eps, d.exp());
        }
        if b - a < 1e-12 {
            break;
        }
    }
    let eta = (0.5 * (a + b)).exp();
    Ok(DualSolution {
        eta,
        value: dual_value(s, eps, eta),
        at_lower: eta <= ETA_MIN * 1.001,
        at_upper: eta >= ETA_MAX * 0.999,
        degenerate: false,
    })
}

/// Normalized weights `softmax(-s / eta)`, computed with max subtraction so
/// arbitrary constant shifts of `s` cancel exactly.
pub fn pi2_weights(s: &[f64], eta: f64) -> Vec<f64> {
    let neg_min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = s.iter().map(|&si| (-(si - neg_min) / eta).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// `KL(w || uniform) = log N + sum_i w_i log w_i`. At a binding optimum of
/// the dual this equals the KL budget.
pub fn weights_kl_from_uniform(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    n.ln()
        + w.iter()
            .map(|&wi| if wi > 0.0 { wi * wi.ln() } else { 0.0 })
            .sum::<f64>()
}

/// Effective sample size `1 / sum w_i^2` of normalized weights.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    1.0 / w.iter().map(|&wi| wi * wi).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct MlUpdateOptions {
    /// Ridge regularization of the per-timestep gain regression.
    pub reg: f64,
    /// Fraction of the step toward the ML covariance; the rest stays at the
    /// previous covariance to slow exploration collapse.
    pub cov_damping: f64,
    /// Eigenvalue floor for updated covariances.
    pub sigma_floor: f64,
    /// Keep the previous gains and refit only the offsets.
    pub freeze_gains: bool,
    /// Below this effective sample size the covariance update is skipped.
    pub min_ess: f64,
}

impl Default for MlUpdateOptions {
    fn default() -> Self {
        MlUpdateOptions {
            reg: 1e-8,
            cov_damping: 0.9,
            sigma_floor: 1e-6,
            freeze_gains: false,
            min_ess: 2.0,
        }
    }
}

/// Per-timestep diagnostics of a weighted ML refit.
#[derive(Debug, Clone)]
pub struct MlUpdateReport {
    pub ess: Vec<f64>,
    /// Timesteps whose covariance update was skipped for degenerate weights.
    pub cov_skipped: Vec<bool>,
}

/// Weighted maximum-likelihood TVLG refit.
///
/// `states`, `controls` and `weights` are indexed `[t][i]`. Per timestep the
/// gains solve a weighted ridge regression of controls on states and the
/// covariance is the weighted residual scatter, damped toward the previous
/// covariance and floored. Weights must be nonnegative; they are normalized
/// internally.
pub fn weighted_ml_update(
    states: &[Vec<DVector<f64>>],
    controls: &[Vec<DVector<f64>>],
    weights: &[Vec<f64>],
    prev: &TvlgPolicy,
    opts: &MlUpdateOptions,
) -> Result<(TvlgPolicy, MlUpdateReport)> {
    let horizon = prev.horizon();
    if states.len() != horizon || controls.len() != horizon || weights.len() != horizon {
        return Err(PilqrError::dim(
            "weighted_ml_update: tables must cover the policy horizon",
        ));
    }
    let n = prev.state_dim();
    let m = prev.action_dim();
    let mut gains = Vec::with_capacity(horizon);
    let mut offsets = Vec::with_capacity(horizon);
    let mut covariances = Vec::with_capacity(horizon);
    let mut ess_all = Vec::with_capacity(horizon);
    let mut cov_skipped = vec![false; horizon];

    for t in 0..horizon {
        let xs = &states[t];
        let us = &controls[t];
        let w_raw = &weights[t];
        let count = xs.len();
        if count == 0 || us.len() != count || w_raw.len() != count {
            return Err(PilqrError::dim(format!(
                "weighted_ml_update: ragged tables at t={t}"
            )));
        }
        if w_raw.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(PilqrError::Numerical {
                context: "weighted_ml_update",
                t,
                msg: "weights must be finite and nonnegative".into(),
            });
        }
        let total: f64 = w_raw.iter().sum();
        if total <= 0.0 {
            return Err(PilqrError::Numerical {
                context: "weighted_ml_update",
                t,
                msg: "weights sum to zero".into(),
            });
        }
        let w: Vec<f64> = w_raw.iter().map(|&v| v / total).collect();
        let ess = effective_sample_size(&w);

        let (k_mat, k_off) = if opts.freeze_gains {
            // Offset-only refit: weighted mean of (u - Kbar x).
            let k_mat = prev.gains[t].clone();
            let mut k_off = DVector::zeros(m);
            for i in 0..count {
                k_off += w[i] * (&us[i] - &k_mat * &xs[i]);
            }
            (k_mat, k_off)
        } else {
            let mut design = DMatrix::zeros(count, n + 1);
            let mut target = DMatrix::zeros(count, m);
            for i in 0..count {
                for j in 0..n {
                    design[(i, j)] = xs[i][j];
                }
                design[(i, n)] = 1.0;
                for j in 0..m {
                    target[(i, j)] = us[i][j];
                }
            }
            let theta = linalg::ridge_regression(&design, &target, &w, opts.reg).ok_or(
                PilqrError::Singular {
                    context: "weighted_ml_update",
                    t,
                },
            )?;
            let theta_t = theta.transpose();
            (
                theta_t.columns(0, n).into_owned(),
                theta_t.column(n).into_owned(),
            )
        };

        let sigma = if ess < opts.min_ess {
            cov_skipped[t] = true;
            prev.covariances[t].clone()
        } else {
            let mut scatter = DMatrix::zeros(m, m);
            for i in 0..count {
                let r = &us[i] - &k_mat * &xs[i] - &k_off;
                scatter.syger(w[i], &r, &r, 1.0);
            }
            scatter.fill_upper_triangle_with_lower_triangle();
            for d in 0..m {
                scatter[(d, d)] += opts.reg;
            }
            let blended = &scatter * opts.cov_damping
                + &prev.covariances[t] * (1.0 - opts.cov_damping);
            linalg::clamp_spd(&blended, opts.sigma_floor)
        };

        gains.push(k_mat);
        offsets.push(k_off);
        covariances.push(sigma);
        ess_all.push(ess);
    }

    let policy = TvlgPolicy {
        gains,
        offsets,
        covariances,
    };
    policy.validate()?;
    Ok((
        policy,
        MlUpdateReport {
            ess: ess_all,
            cov_skipped,
        },
    ))
}
