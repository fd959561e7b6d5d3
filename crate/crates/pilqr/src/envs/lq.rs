//! Linear-quadratic benchmark environment.
//!
//! `x_{t+1} = A x_t + B u_t`, cost `c = 0.5 x^T Q x + 0.5 u^T R u`. The
//! quadratic expansion of this cost is exact and a fitted linear model can be
//! exact too, which makes this env the ground-truth case for every
//! model-based code path: the unconstrained backward pass must reproduce the
//! finite-horizon Riccati solution and residual costs must vanish.

use super::{CostTerms, Environment};
use crate::error::{PilqrError, Result};
use crate::linalg;
use crate::rng;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct LqParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub process_noise_std: f64,
}

impl LqParams {
    /// Deterministic random problem instance: `A` scaled to spectral radius
    /// ~0.95 (marginally stable), dense `B`, PSD `Q`, PD `R`. Used by tests
    /// and the LQ benchmark configs.
    pub fn random(
        state_dim: usize,
        action_dim: usize,
        horizon: usize,
        process_noise_std: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, 0, 0, 0);
        let raw_a = DMatrix::from_fn(state_dim, state_dim, |_, _| {
            use rand::Rng;
            r.sample::<f64, _>(rand_distr::StandardNormal)
        });
        // Crude spectral normalization: scale by the Frobenius norm bound.
        let a = &raw_a * (0.95 / raw_a.norm().max(1e-9));
        let b = DMatrix::from_fn(state_dim, action_dim, |_, _| {
            use rand::Rng;
            r.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let qroot = DMatrix::from_fn(state_dim, state_dim, |_, _| {
            use rand::Rng;
            r.sample::<f64, _>(rand_distr::StandardNormal)
        }) * 0.5;
        let q = &qroot * qroot.transpose() + DMatrix::identity(state_dim, state_dim) * 0.1;
        let rroot = DMatrix::from_fn(action_dim, action_dim, |_, _| {
            use rand::Rng;
            r.sample::<f64, _>(rand_distr::StandardNormal)
        }) * 0.3;
        let rr = &rroot * rroot.transpose() + DMatrix::identity(action_dim, action_dim) * 0.5;
        let x0 = rng::standard_normal(&mut r, state_dim) * 2.0;
        LqParams {
            a,
            b,
            q,
            r: rr,
            x0,
            horizon,
            process_noise_std,
        }
    }
}

/// JSON-facing condition for the LQ env: just the initial state (the system
/// matrices live in the env parameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqCondition {
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LqEnv {
    params: LqParams,
}

impl LqEnv {
    pub fn from_params(params: LqParams) -> Result<Self> {
        let n = params.a.nrows();
        let m = params.b.ncols();
        if params.a.ncols() != n || params.b.nrows() != n {
            return Err(PilqrError::dim("LQ: A must be n x n and B n x m"));
        }
        if params.q.shape() != (n, n) || params.r.shape() != (m, m) {
            return Err(PilqrError::dim("LQ: Q must be n x n and R m x m"));
        }
        if params.x0.len() != n {
            return Err(PilqrError::dim("LQ: x0 length must match A"));
        }
        if params.horizon == 0 {
            return Err(PilqrError::config("LQ: horizon must be positive"));
        }
        // R must be PD (the backward pass divides by it); Q only PSD.
        if linalg::chol_lower(&params.r).is_none() {
            return Err(PilqrError::config("LQ: R is not positive definite"));
        }
        if linalg::chol_lower(&(linalg::symmetrize(&params.q) + DMatrix::identity(n, n) * 1e-9))
            .is_none()
        {
            return Err(PilqrError::config("LQ: Q is not positive semidefinite"));
        }
        Ok(LqEnv { params })
    }

    pub fn params(&self) -> &LqParams {
        &self.params
    }

    pub fn with_x0(mut self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.params.a.nrows() {
            return Err(PilqrError::dim("LQ: x0 length must match A"));
        }
        self.params.x0 = x0;
        Ok(self)
    }
}

impl Environment for LqEnv {
    fn state_dim(&self) -> usize {
        self.params.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.params.b.ncols()
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn initial_state(&self) -> DVector<f64> {
        self.params.x0.clone()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> DVector<f64> {
        &self.params.a * x + &self.params.b * u
    }

    fn cost(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> CostTerms {
        let qx = &self.params.q * x;
        let ru = &self.params.r * u;
        CostTerms {
            value: 0.5 * x.dot(&qx) + 0.5 * u.dot(&ru),
            c_x: qx,
            c_u: ru,
            c_xx: self.params.q.clone(),
            c_uu: self.params.r.clone(),
            c_xu: DMatrix::zeros(x.len(), u.len()),
        }
    }

    fn cost_value(&self, x: &DVector<f64>, u: &DVector<f64>, _t: usize) -> f64 {
        0.5 * x.dot(&(&self.params.q * x)) + 0.5 * u.dot(&(&self.params.r * u))
    }

    fn process_noise_std(&self) -> f64 {
        self.params.process_noise_std
    }

    fn name(&self) -> &'static str {
        "lq"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::fd;
    use approx::assert_relative_eq;

    #[test]
    fn step_is_linear() {
        let env = LqEnv::from_params(LqParams::random(3, 2, 10, 0.0, 1)).unwrap();
        let x = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let u = DVector::from_row_slice(&[0.3, 0.7]);
        let got = env.step(&x, &u, 4);
        let want = &env.params().a * &x + &env.params().b * &u;
        assert_relative_eq!(got, want, epsilon = 0.0);
    }

    #[test]
    fn cost_derivatives_match_fd() {
        let env = LqEnv::from_params(LqParams::random(3, 2, 10, 0.0, 2)).unwrap();
        let mut r = crate::rng::stream(5, 0, 0, 0);
        for t in 0..10 {
            let x = crate::rng::standard_normal(&mut r, 3);
            let u = crate::rng::standard_normal(&mut r, 2);
            fd::check_cost_derivatives(&env, &x, &u, t, 1e-5);
        }
    }

    #[test]
    fn rejects_indefinite_r() {
        let mut p = LqParams::random(2, 2, 5, 0.0, 3);
        p.r[(0, 0)] = -1.0;
        assert!(LqEnv::from_params(p).is_err());
    }
}
