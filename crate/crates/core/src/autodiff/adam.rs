use ndarray::{Array2, Zip};

use super::Real;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for Adam, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// What a single [`AdamState::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global L2 norm of the raw gradients.
    pub grad_norm: f64,
    /// Factor applied to the gradients before the moment updates.
    pub clip_scale: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Array2<F>> = shapes.into_iter().map(Array2::zeros).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips the gradients to global norm `clip`, then applies one
    /// bias-corrected Adam update with learning rate `lr`.
    ///
    /// A non-finite gradient leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [Array2<F>], grads: &[Array2<F>], lr: f64, clip: f64) -> Result<StepInfo> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if clip <= 0.0 {
            return Err(Error::Config(format!("clip must be positive, got {clip}")));
        }
        let mut sq = 0.0f64;
        for g in grads {
            for &x in g {
                let x = x.to_f64().unwrap_or(f64::NAN);
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let clip_scale = if norm > clip { clip / norm } else { 1.0 };

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let scale = F::from_f64_lossy(clip_scale);
        let bc1 = F::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = F::from_f64_lossy(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * scale;
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(StepInfo {
            grad_norm: norm,
            clip_scale,
        })
    }
}
