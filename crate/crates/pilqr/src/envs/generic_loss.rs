//! The two-term loss used by every non-quadratic cost in this crate:
//!
//! `l(z) = alpha/2 * ||z||^2 + beta * sqrt(gamma + ||z||^2)`
//!
//! The squared term shapes the cost far from the target; the Huber-style
//! square-root term keeps a nonvanishing gradient near it without the kink of
//! a plain norm. `gamma > 0` makes the loss smooth everywhere, including
//! `z = 0`.

use nalgebra::{DMatrix, DVector};

pub const DEFAULT_GAMMA: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GenericLoss {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GenericLoss {
    pub fn new(alpha: f64, beta: f64) -> Self {
        GenericLoss {
            alpha,
            beta,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        let sq = z.norm_squared();
        0.5 * self.alpha * sq + self.beta * (self.gamma + sq).sqrt()
    }

    /// Gradient `alpha z + beta z / sqrt(gamma + ||z||^2)`.
    pub fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let s = (self.gamma + z.norm_squared()).sqrt();
        z * (self.alpha + self.beta / s)
    }

    /// Hessian `alpha I + beta (I / s - z z^T / s^3)`, `s = sqrt(gamma + ||z||^2)`.
    pub fn hess(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = z.len();
        let s = (self.gamma + z.norm_squared()).sqrt();
        let mut h = DMatrix::identity(d, d) * (self.alpha + self.beta / s);
        h.syger(-self.beta / (s * s * s), z, z, 1.0);
        h.fill_upper_triangle_with_lower_triangle();
        h
    }

    pub fn all(&self, z: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        (self.value(z), self.grad(z), self.hess(z))
    }
}
