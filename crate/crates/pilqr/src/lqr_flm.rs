//! KL-constrained LQR with fitted linear models.
//!
//! One backward pass turns (fitted dynamics, quadratic cost model, previous
//! policy, per-timestep KL budgets `eps_t`) into a new TVLG policy. At each
//! timestep the Q-function of the quadratic model is formed by dynamic
//! programming,
//!
//! `Q_xx = c_xx + f_x^T V'_xx f_x`        `Q_x = c_x + f_x^T (V'_x + V'_xx f_c)`
//! `Q_uu = c_uu + f_u^T V'_xx f_u`        `Q_u = c_u + f_u^T (V'_x + V'_xx f_c)`
//! `Q_xu = c_xu + f_x^T V'_xx f_u`
//!
//! (cost blocks in absolute coordinates, constants of the affine dynamics
//! folded into the linear terms), and the KL-constrained update is solved in
//! closed form given the dual variable `eta_t`:
//!
//! `Sigma = (Q_uu / eta + Sigmabar^-1)^-1`
//! `K = -Sigma (Q_ux / eta - Sigmabar^-1 Kbar)`
//! `k = -Sigma (Q_u  / eta - Sigmabar^-1 kbar)`
//!
//! `eta_t` is found by bisection so the expected KL to the previous policy —
//! averaged over the sampled states at `t`, the only state distribution
//! available — meets `eps_t`. As `eta -> inf` the update collapses onto the
//! previous policy; as `eta -> 0` it approaches the unconstrained LQR
//! solution, so the measured KL is monotone in `eta` and bisection brackets
//! cleanly. When even the least-constrained end of the bracket satisfies the
//! budget, the constraint is slack and the exact unconstrained gains
//! `K = -Q_uu^-1 Q_ux`, `k = -Q_uu^-1 Q_u` are used (the `eta -> 0` limit).
//!
//! Because the constrained gains do not minimize `Q`, the value recursion
//! must substitute them explicitly:
//!
//! `V_x  = Q_x + K^T Q_u + K^T Q_uu k + Q_xu k`
//! `V_xx = Q_xx + K^T Q_uu K + Q_xu K + (Q_xu K)^T`   (then symmetrized)

use crate::cost_approx::QuadCostApprox;
use crate::dyn_fit::FittedDynamics;
use crate::error::{PilqrError, Result};
use crate::kl;
use crate::linalg;
use crate::policy::TvlgPolicy;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct LqrFlmOptions {
    /// Bracket for the dual variable: `eta in [eta_min, eta_max]`.
    pub eta_min: f64,
    pub eta_max: f64,
    /// The solve stops when `|KL - eps| <= kl_rel_tol * eps`.
    pub kl_rel_tol: f64,
    /// Bisection iteration cap.
    pub max_bisect: usize,
    /// Levenberg regularization of `Q_uu`: start at `mu_init`, multiply by 10
    /// on Cholesky failure, give up past `mu_max`.
    pub mu_init: f64,
    pub mu_max: f64,
    /// Eigenvalue floor for the returned covariances.
    pub sigma_floor: f64,
}

impl Default for LqrFlmOptions {
    fn default() -> Self {
        LqrFlmOptions {
            eta_min: 1e-6,
            eta_max: 1e6,
            kl_rel_tol: 0.05,
            max_bisect: 80,
            mu_init: 1e-6,
            mu_max: 1e2,
            sigma_floor: 1e-8,
        }
    }
}

/// Result of one backward pass, with per-timestep solver diagnostics.
#[derive(Debug, Clone)]
pub struct BackwardPassOutcome {
    pub policy: TvlgPolicy,
    /// Dual variable per timestep.
    pub eta: Vec<f64>,
    /// Expected KL to the previous policy at the returned parameters,
    /// measured on the provided states.
    pub kl: Vec<f64>,
    /// `|KL - eps| <= kl_rel_tol * eps` at this timestep.
    pub converged: Vec<bool>,
    /// The KL budget was slack even at `eta_min`; unconstrained gains used.
    pub slack: Vec<bool>,
}

/// Per-timestep dual solve outcome.
#[derive(Debug, Clone, Copy)]
pub struct EtaSolution {
    pub eta: f64,
    /// Measured KL at the solution.
    pub kl: f64,
    pub converged: bool,
    /// Hit the lower bracket end (constraint slack there).
    pub at_lower: bool,
    /// Hit the upper bracket end (budget unreachable even at max eta).
    pub at_upper: bool,
}

/// Everything `solve_eta` needs about one timestep of the Q-function and the
/// previous policy. `sigbar_inv*` are precomputed products with the previous
/// policy's inverse covariance.
#[allow(non_snake_case)]
struct StepProblem<'a> {
    Q_uu: &'a DMatrix<f64>,
    Q_u: &'a DVector<f64>,
    Q_ux: &'a DMatrix<f64>,
    prev_K: &'a DMatrix<f64>,
    prev_k: &'a DVector<f64>,
    prev_sigma: &'a DMatrix<f64>,
    sigbar_inv: &'a DMatrix<f64>,
    sigbar_inv_K: &'a DMatrix<f64>,
    sigbar_inv_k: &'a DVector<f64>,
}

/// Constrained solution at a given dual value, computed in the scaled form
/// `A = Q_uu + eta * Sigmabar^-1`, `Sigma = eta A^-1`,
/// `K = -A^-1 (Q_ux - eta Sigmabar^-1 Kbar)`, which is algebraically the
/// closed form above but stays well-conditioned at both bracket ends.
#[allow(non_snake_case)]
fn constrained_solution(
    p: &StepProblem,
    eta: f64,
    t: usize,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let A = p.Q_uu + eta * p.sigbar_inv;
    let chol = linalg::chol(&A).ok_or(PilqrError::Numerical {
        context: "constrained policy solve",
        t,
        msg: format!("Q_uu + eta * Sigmabar^-1 not PD at eta={eta:.3e}"),
    })?;
    let K = -chol.solve(&(p.Q_ux - eta * p.sigbar_inv_K));
    let k = -chol.solve(&(p.Q_u - eta * p.sigbar_inv_k));
    let sigma = chol.inverse() * eta;
    Ok((K, k, linalg::symmetrize(&sigma)))
}

#[allow(non_snake_case)]
fn kl_of(
    p: &StepProblem,
    K: &DMatrix<f64>,
    k: &DVector<f64>,
    sigma: &DMatrix<f64>,
    states: &[DVector<f64>],
    t: usize,
) -> Result<f64> {
    kl::conditional_kl_at(K, k, sigma, p.prev_K, p.prev_k, p.prev_sigma, states, t)
}

/// Finds `eta_t` such that the expected KL between the constrained update and
/// the previous policy matches `eps` within `opts.kl_rel_tol`, or returns the
/// bracket endpoint with the corresponding flag. Falls back to a grid scan if
/// the measured KL fails to bracket monotonically (which the closed form
/// should never produce, but fitted numbers can).
#[allow(non_snake_case)]
fn solve_eta_inner(
    p: &StepProblem,
    states: &[DVector<f64>],
    eps: f64,
    opts: &LqrFlmOptions,
    t: usize,
) -> Result<EtaSolution> {
    let eval = |eta: f64| -> Result<f64> {
        let (K, k, sigma) = constrained_solution(p, eta, t)?;
        kl_of(p, &K, &k, &sigma, states, t)
    };

    let kl_lo = eval(opts.eta_min)?;
    if kl_lo <= eps {
        return Ok(EtaSolution {
            eta: opts.eta_min,
            kl: kl_lo,
            converged: (kl_lo - eps).abs() <= opts.kl_rel_tol * eps,
            at_lower: true,
            at_upper: false,
        });
    }
    let kl_hi = eval(opts.eta_max)?;
    if kl_hi > eps {
        if kl_hi > kl_lo {
            // Non-monotone bracket: scan instead of bisecting.
            return grid_scan_eta(p, states, eps, opts, t);
        }
        return Ok(EtaSolution {
            eta: opts.eta_max,
            kl: kl_hi,
            converged: (kl_hi - eps).abs() <= opts.kl_rel_tol * eps,
            at_lower: false,
            at_upper: true,
        });
    }

    // KL(eta) is decreasing: KL > eps at lo, KL <= eps at hi. Bisect in log
    // space until the relative gap closes.
    let mut lo = opts.eta_min;
    let mut hi = opts.eta_max;
    let mut best = EtaSolution {
        eta: hi,
        kl: kl_hi,
        converged: false,
        at_lower: false,
        at_upper: false,
    };
    for _ in 0..opts.max_bisect {
        let mid = (lo.ln() + 0.5 * (hi.ln() - lo.ln())).exp();
        let kl_mid = eval(mid)?;
        if (kl_mid - eps).abs() <= opts.kl_rel_tol * eps * 0.2 {
            return Ok(EtaSolution {
                eta: mid,
                kl: kl_mid,
                converged: true,
                at_lower: false,
                at_upper: false,
            });
        }
        if kl_mid > eps {
            lo = mid;
        } else {
            hi = mid;
            best = EtaSolution {
                eta: mid,
                kl: kl_mid,
                converged: (kl_mid - eps).abs() <= opts.kl_rel_tol * eps,
                at_lower: false,
                at_upper: false,
            };
        }
    }
    Ok(best)
}

/// 200-point log-spaced scan minimizing `|KL - eps|`; the safety net for a
/// non-monotone measured KL.
fn grid_scan_eta(
    p: &StepProblem,
    states: &[DVector<f64>],
    eps: f64,
    opts: &LqrFlmOptions,
    t: usize,
) -> Result<EtaSolution> {
    let points = 200;
    let (ln_lo, ln_hi) = (opts.eta_min.ln(), opts.eta_max.ln());
    let mut best: Option<EtaSolution> = None;
    for i in 0..points {
        let eta = (ln_lo + (ln_hi - ln_lo) * i as f64 / (points - 1) as f64).exp();
        let (k_mat, k_vec, sigma) = constrained_solution(p, eta, t)?;
        let kl = kl_of(p, &k_mat, &k_vec, &sigma, states, t)?;
        let cand = EtaSolution {
            eta,
            kl,
            converged: (kl - eps).abs() <= opts.kl_rel_tol * eps,
            at_lower: i == 0,
            at_upper: i == points - 1,
        };
        if best
            .as_ref()
            .map(|b| (kl - eps).abs() < (b.kl - eps).abs())
            .unwrap_or(true)
        {
            best = Some(cand);
        }
    }
    Ok(best.expect("grid scan evaluated at least one point"))
}

/// Public entry for the per-timestep dual solve, exercised directly by tests.
/// `states` are the sampled states at timestep `t` the KL expectation is
/// taken over.
#[allow(non_snake_case, clippy::too_many_arguments)]
pub fn solve_eta(
    t: usize,
    Q_uu: &DMatrix<f64>,
    Q_u: &DVector<f64>,
    Q_ux: &DMatrix<f64>,
    prev_K: &DMatrix<f64>,
    prev_k: &DVector<f64>,
    prev_sigma: &DMatrix<f64>,
    states: &[DVector<f64>],
    eps: f64,
    opts: &LqrFlmOptions,
) -> Result<EtaSolution> {
    if eps <= 0.0 {
        return Err(PilqrError::config("solve_eta: eps must be positive"));
    }
    let chol_bar = linalg::chol(prev_sigma).ok_or(PilqrError::Numerical {
        context: "solve_eta",
        t,
        msg: "previous covariance not PD".into(),
    })?;
    let sigbar_inv = chol_bar.inverse();
    let sigbar_inv_K = chol_bar.solve(prev_K);
    let sigbar_inv_k = chol_bar.solve(prev_k);
    let p = StepProblem {
        Q_uu,
        Q_u,
        Q_ux,
        prev_K,
        prev_k,
        prev_sigma,
        sigbar_inv: &sigbar_inv,
        sigbar_inv_K: &sigbar_inv_K,
        sigbar_inv_k: &sigbar_inv_k,
    };
    solve_eta_inner(&p, states, eps, opts, t)
}

/// One KL-constrained backward pass.
///
/// `states[t]` lists the sampled states at timestep `t` (from the batch the
/// models were fitted to); they define the state distribution the KL
/// constraint is averaged over. `eps` holds one KL budget per timestep.
#[allow(non_snake_case)]
pub fn backward_pass(
    dynamics: &FittedDynamics,
    cost: &QuadCostApprox,
    prev: &TvlgPolicy,
    eps: &[f64],
    states: &[Vec<DVector<f64>>],
    opts: &LqrFlmOptions,
) -> Result<BackwardPassOutcome> {
    let horizon = cost.horizon();
    let n = prev.state_dim();
    let m = prev.action_dim();
    if prev.horizon() != horizon || eps.len() != horizon || states.len() != horizon {
        return Err(PilqrError::dim(
            "backward_pass: cost, policy, eps and states must share the horizon",
        ));
    }
    if dynamics.len() + 1 != horizon {
        return Err(PilqrError::dim(format!(
            "backward_pass: need {} fitted transitions for horizon {}, got {}",
            horizon - 1,
            horizon,
            dynamics.len()
        )));
    }
    if eps.iter().any(|&e| !(e > 0.0)) {
        return Err(PilqrError::config("backward_pass: all eps_t must be positive"));
    }

    let mut gains = vec![DMatrix::zeros(m, n); horizon];
    let mut offsets = vec![DVector::zeros(m); horizon];
    let mut covs = vec![DMatrix::zeros(m, m); horizon];
    let mut etas = vec![0.0; horizon];
    let mut kls = vec![0.0; horizon];
    let mut converged = vec![false; horizon];
    let mut slack = vec![false; horizon];

    let mut V_x = DVector::zeros(n);
    let mut V_xx = DMatrix::zeros(n, n);

    for t in (0..horizon).rev() {
        let (c_big, c_lin, _) = cost.absolute_form(t);
        let mut Q_xx = c_big.view((0, 0), (n, n)).into_owned();
        let mut Q_uu = c_big.view((n, n), (m, m)).into_owned();
        let mut Q_xu = c_big.view((0, n), (n, m)).into_owned();
        let mut Q_x = c_lin.rows(0, n).into_owned();
        let mut Q_u = c_lin.rows(n, m).into_owned();

        if t + 1 < horizon {
            let f_x = &dynamics.f_x[t];
            let f_u = &dynamics.f_u[t];
            let f_c = &dynamics.f_c[t];
            let vxx_fx = &V_xx * f_x;
            let vxx_fu = &V_xx * f_u;
            Q_xx += f_x.transpose() * &vxx_fx;
            Q_uu += f_u.transpose() * &vxx_fu;
            Q_xu += f_x.transpose() * &vxx_fu;
            let v_plus = &V_x + &V_xx * f_c;
            Q_x += f_x.transpose() * &v_plus;
            Q_u += f_u.transpose() * &v_plus;
        }
        Q_xx = linalg::symmetrize(&Q_xx);
        Q_uu = linalg::symmetrize(&Q_uu);

        // Levenberg repair: bump Q_uu's diagonal until it factors.
        let mut mu = 0.0;
        while linalg::chol(&Q_uu).is_none() {
            mu = if mu == 0.0 { opts.mu_init } else { mu * 10.0 };
            if mu > opts.mu_max {
                return Err(PilqrError::Numerical {
                    context: "backward_pass",
                    t,
                    msg: format!("Q_uu not PD even with mu={:.1e}", opts.mu_max),
                });
            }
            for d in 0..m {
                Q_uu[(d, d)] += mu;
            }
        }

        let Q_ux = Q_xu.transpose();
        let sol = solve_eta(
            t,
            &Q_uu,
            &Q_u,
            &Q_ux,
            &prev.gains[t],
            &prev.offsets[t],
            &prev.covariances[t],
            &states[t],
            eps[t],
            opts,
        )?;

        let (K, k, sigma) = if sol.at_lower && sol.kl <= eps[t] {
            // Slack constraint: exact unconstrained gains (the eta -> 0
            // limit), covariance from the closed form at the bracket end so
            // it stays finite and PD.
            let chol_quu = linalg::chol(&Q_uu).expect("Q_uu PD after repair");
            let K = -chol_quu.solve(&Q_ux);
            let k = -chol_quu.solve(&Q_u);
            let sigbar_inv = linalg::spd_inverse(&prev.covariances[t]).expect("prev Sigma PD");
            let a = &Q_uu + sol.eta * &sigbar_inv;
            let sigma = linalg::chol(&a)
                .ok_or(PilqrError::Numerical {
                    context: "backward_pass",
                    t,
                    msg: "covariance solve failed at the slack branch".into(),
                })?
                .inverse()
                * sol.eta;
            slack[t] = true;
            (K, k, linalg::symmetrize(&sigma))
        } else {
            let chol_bar = linalg::chol(&prev.covariances[t]).expect("prev Sigma PD");
            let sigbar_inv = chol_bar.inverse();
            let sigbar_inv_K = chol_bar.solve(&prev.gains[t]);
            let sigbar_inv_k = chol_bar.solve(&prev.offsets[t]);
            constrained_solution(
                &StepProblem {
                    Q_uu: &Q_uu,
                    Q_u: &Q_u,
                    Q_ux: &Q_ux,
                    prev_K: &prev.gains[t],
                    prev_k: &prev.offsets[t],
                    prev_sigma: &prev.covariances[t],
                    sigbar_inv: &sigbar_inv,
                    sigbar_inv_K: &sigbar_inv_K,
                    sigbar_inv_k: &sigbar_inv_k,
                },
                sol.eta,
                t,
            )?
        };

        let sigma = linalg::clamp_spd(&sigma, opts.sigma_floor);
        // Re-measure the KL at the final parameters (flooring can move it).
        let measured = kl::conditional_kl_at(
            &K,
            &k,
            &sigma,
            &prev.gains[t],
            &prev.offsets[t],
            &prev.covariances[t],
            &states[t],
            t,
        )?;

        // Value recursion with the (generally suboptimal) returned gains.
        let KtQuu = K.transpose() * &Q_uu;
        let new_V_x = &Q_x + K.transpose() * &Q_u + &KtQuu * &k + &Q_xu * &k;
        let QxuK = &Q_xu * &K;
        let new_V_xx = &Q_xx + &KtQuu * &K + &QxuK + QxuK.transpose();

        V_x = new_V_x;
        V_xx = linalg::symmetrize(&new_V_xx);

        gains[t] = K;
        offsets[t] = k;
        covs[t] = sigma;
        etas[t] = sol.eta;
        kls[t] = measured;
        converged[t] = sol.converged;
    }

    let policy = TvlgPolicy {
        gains,
        offsets,
        covariances: covs,
    };
    policy.validate()?;
    Ok(BackwardPassOutcome {
        policy,
        eta: etas,
        kl: kls,
        converged,
        slack,
    })
}
