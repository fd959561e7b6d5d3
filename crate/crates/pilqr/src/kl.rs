//! KL divergence between conditional Gaussian policies.
//!
//! For two TVLG policies the conditional KL at a state `x` is the Gaussian KL
//! between their action distributions at that state. The state-dependence
//! enters only through the mean difference `(K1 - K2) x + (k1 - k2)`, so the
//! expectation over a state distribution is estimated by averaging that single
//! term over sampled states — the covariance terms are state-independent.

use crate::error::{PilqrError, Result};
use crate::linalg;
use crate::policy::TvlgPolicy;
use nalgebra::{DMatrix, DVector};

/// `E_x[ KL( N(K1 x + k1, S1) || N(K2 x + k2, S2) ) ]` with the expectation
/// taken as the empirical mean over `states`.
#[allow(non_snake_case)]
pub fn conditional_kl_at(
    K1: &DMatrix<f64>,
    k1: &DVector<f64>,
    S1: &DMatrix<f64>,
    K2: &DMatrix<f64>,
    k2: &DVector<f64>,
    S2: &DMatrix<f64>,
    states: &[DVector<f64>],
    t: usize,
) -> Result<f64> {
    let d = k1.len() as f64;
    let c2 = linalg::chol(S2).ok_or(PilqrError::Numerical {
        context: "conditional KL",
        t,
        msg: "reference covariance not positive definite".into(),
    })?;
    let logdet2 = 2.0 * c2.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet1 = linalg::logdet_spd(S1).ok_or(PilqrError::Numerical {
        context: "conditional KL",
        t,
        msg: "covariance not positive definite".into(),
    })?;
    let trace = c2.solve(S1).trace();

    let dk = K1 - K2;
    let dkk = k1 - k2;
    let mean_quad = if states.is_empty() {
        // No states to average over: the offset difference alone.
        let dm = &dkk;
        dm.dot(&c2.solve(dm))
    } else {
        let mut acc = 0.0;
        for x in states {
            let dm = &dk * x + &dkk;
            acc += dm.dot(&c2.solve(&dm));
        }
        acc / states.len() as f64
    };

    Ok(0.5 * (logdet2 - logdet1 - d + trace + mean_quad))
}

/// Per-timestep expected KL `E_x[KL(p_new(.|x) || p_old(.|x))]`, averaged over
/// the provided per-timestep state samples (`states[t]` lists the states used
/// at timestep `t`).
pub fn conditional_kl(
    p_new: &TvlgPolicy,
    p_old: &TvlgPolicy,
    states: &[Vec<DVector<f64>>],
) -> Result<Vec<f64>> {
    if p_new.horizon() != p_old.horizon() || states.len() != p_new.horizon() {
        return Err(PilqrError::dim(
            "conditional_kl: horizons of policies and state table differ",
        ));
    }
    (0..p_new.horizon())
        .map(|t| {
            conditional_kl_at(
                &p_new.gains[t],
                &p_new.offsets[t],
                &p_new.covariances[t],
                &p_old.gains[t],
                &p_old.offsets[t],
                &p_old.covariances[t],
                &states[t],
                t,
            )
        })
        .collect()
}
