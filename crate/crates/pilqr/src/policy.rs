//! Time-varying linear-Gaussian policies.
//!
//! A TVLG policy is the controller class everything in this crate optimizes:
//! `p(u_t | x_t) = N(K_t x_t + k_t, Sigma_t)` for `t = 0..T-1`. The JSON
//! schema (used for checkpoints and the CLI's `policy.json`) is
//! `{"T": horizon, "K": [[..]; T], "k": [[..]; T], "Sigma": [[..]; T]}` with
//! matrices as row-major nested arrays.

use crate::error::{PilqrError, Result};
use crate::linalg;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct TvlgPolicy {
    /// Feedback gains `K_t`, each `action_dim x state_dim`.
    pub gains: Vec<DMatrix<f64>>,
    /// Offsets `k_t`, each `action_dim`.
    pub offsets: Vec<DVector<f64>>,
    /// Action covariances `Sigma_t`, each `action_dim x action_dim`, SPD.
    pub covariances: Vec<DMatrix<f64>>,
}

impl TvlgPolicy {
    /// Zero-mean policy `N(0, noise_std^2 I)` at every timestep — the standard
    /// random initialization before any update has run.
    pub fn zero_mean(horizon: usize, state_dim: usize, action_dim: usize, noise_std: f64) -> Self {
        let k = DMatrix::zeros(action_dim, state_dim);
        let off = DVector::zeros(action_dim);
        let sigma = DMatrix::identity(action_dim, action_dim) * noise_std * noise_std;
        TvlgPolicy {
            gains: vec![k; horizon],
            offsets: vec![off; horizon],
            covariances: vec![sigma; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    /// Mean action `K_t x + k_t`.
    pub fn mean_action(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gains[t] * x + &self.offsets[t]
    }

    /// Lower Cholesky factors of every `Sigma_t`. Fails if any covariance has
    /// lost positive definiteness.
    pub fn chol_factors(&self) -> Result<Vec<DMatrix<f64>>> {
        self.covariances
            .iter()
            .enumerate()
            .map(|(t, s)| {
                linalg::chol_lower(s).ok_or(PilqrError::Numerical {
                    context: "policy covariance Cholesky",
                    t,
                    msg: "Sigma_t is not positive definite".into(),
                })
            })
            .collect()
    }

    /// Structural validity: consistent dimensions across timesteps, symmetric
    /// PD covariances, finite entries.
    pub fn validate(&self) -> Result<()> {
        if self.gains.is_empty() {
            return Err(PilqrError::dim("policy has zero horizon"));
        }
        let (m, n) = (self.action_dim(), self.state_dim());
        if self.offsets.len() != self.horizon() || self.covariances.len() != self.horizon() {
            return Err(PilqrError::dim("per-timestep lists have unequal lengths"));
        }
        for t in 0..self.horizon() {
            if self.gains[t].shape() != (m, n)
                || self.offsets[t].len() != m
                || self.covariances[t].shape() != (m, m)
            {
                return Err(PilqrError::dim(format!("inconsistent shapes at t={t}")));
            }
            if !linalg::all_finite_mat(&self.gains[t])
                || !linalg::all_finite_vec(&self.offsets[t])
                || !linalg::all_finite_mat(&self.covariances[t])
            {
                return Err(PilqrError::Numerical {
                    context: "policy validation",
                    t,
                    msg: "non-finite parameter".into(),
                });
            }
            let asym = (&self.covariances[t] - self.covariances[t].transpose()).abs().max();
            if asym > 1e-9 {
                return Err(PilqrError::Numerical {
                    context: "policy validation",
                    t,
                    msg: format!("Sigma_t asymmetric by {asym:.2e}"),
                });
            }
            if linalg::chol_lower(&self.covariances[t]).is_none() {
                return Err(PilqrError::Numerical {
                    context: "policy validation",
                    t,
                    msg: "Sigma_t is not positive definite".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> PolicyJson {
        PolicyJson {
            horizon: self.horizon(),
            gains: self.gains.iter().map(mat_rows).collect(),
            offsets: self.offsets.iter().map(|v| v.iter().copied().collect()).collect(),
            covariances: self.covariances.iter().map(mat_rows).collect(),
        }
    }

    pub fn from_json(j: &PolicyJson) -> Result<Self> {
        let gains = j.gains.iter().map(rows_mat).collect::<Result<Vec<_>>>()?;
        let offsets: Vec<DVector<f64>> = j
            .offsets
            .iter()
            .map(|r| DVector::from_row_slice(r))
            .collect();
        let covariances = j.covariances.iter().map(rows_mat).collect::<Result<Vec<_>>>()?;
        if gains.len() != j.horizon {
            return Err(PilqrError::dim("T does not match gain list length"));
        }
        let p = TvlgPolicy { gains, offsets, covariances };
        p.validate()?;
        Ok(p)
    }
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn rows_mat(rows: &Vec<Vec<f64>>) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(PilqrError::dim("empty matrix in policy JSON"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PilqrError::dim("ragged matrix in policy JSON"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// Serialization schema for [`TvlgPolicy`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyJson {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub gains: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "k")]
    pub offsets: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_policy() -> TvlgPolicy {
        let mut p = TvlgPolicy::zero_mean(3, 2, 1, 0.5);
        p.gains[1] = DMatrix::from_row_slice(1, 2, &[0.25, -1.5]);
        p.offsets[2] = DVector::from_row_slice(&[0.125]);
        p
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let p = small_policy();
        let s = serde_json::to_string(&p.to_json()).unwrap();
        let back = TvlgPolicy::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn json_field_names() {
        let s = serde_json::to_string(&small_policy().to_json()).unwrap();
        for key in ["\"T\"", "\"K\"", "\"k\"", "\"Sigma\""] {
            assert!(s.contains(key), "missing {key} in {s}");
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let s = r#"{"T":1,"K":[[[0.0]]],"k":[[0.0]],"Sigma":[[[1.0]]],"extra":3}"#;
        assert!(serde_json::from_str::<PolicyJson>(s).is_err());
    }

    #[test]
    fn validate_catches_indefinite_covariance() {
        let mut p = small_policy();
        p.covariances[0][(0, 0)] = -1.0;
        assert!(p.validate().is_err());
    }
}
