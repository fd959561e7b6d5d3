//! Trajectory-centric reinforcement learning with time-varying linear-Gaussian
//! (TVLG) policies.
//!
//! The crate implements three per-iteration policy updates over the same
//! rollout/fit machinery, plus a distillation layer and an experiment harness:
//!
//! - [`lqr_flm`]: KL-constrained LQR with fitted local linear models. Fast on
//!   smooth problems, biased wherever the local model is wrong.
//! - [`pi2`]: KL-constrained path-integral update (episodic REPS on
//!   costs-to-go). Model-free and unbiased, but sample hungry.
//! - [`pilqr`]: the hybrid — an LQR step on the quadratic cost approximation
//!   followed by a PI2 step on the residual costs-to-go, so the model-based
//!   stage does the bulk of the work and the model-free stage corrects it.
//! - [`mdgps`]: mirror-descent guided policy search; distills per-condition
//!   TVLG policies into one global policy and re-centers the local updates on
//!   its linearization.
//! - [`harness`]: JSON-configured experiment runner with deterministic CSV
//!   learning curves and a reproduction manifest.
//!
//! Everything downstream of a `(seed, condition, rollout, timestep)` tuple is
//! bitwise deterministic; see [`rng`].

pub mod cost_approx;
pub mod dyn_fit;
pub mod envs;
pub mod error;
pub mod harness;
pub mod kl;
pub mod linalg;
pub mod lqr_flm;
pub mod mdgps;
pub mod pi2;
pub mod pilqr;
pub mod policy;
pub mod rng;
pub mod rollout;

pub use error::{PilqrError, Result};
pub use policy::TvlgPolicy;
pub use rollout::{sample_rollouts, Rollout, RolloutBatch};
