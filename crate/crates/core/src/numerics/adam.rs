use serde::{Deserialize, Serialize};

use super::mlp::{GradBundle, MlpParams};
use crate::error::{LabError, Result};

/// Adaptive-moment optimizer state for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(parts: &[&[f64]]) -> Self {
        let zeros: Vec<Vec<f64>> = parts.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn for_mlp(params: &MlpParams) -> Self {
        Self::new(&params.parts())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moments, each flattened in part order.
    pub fn flat_moments(&self) -> (Vec<f64>, Vec<f64>) {
        (self.m.concat(), self.v.concat())
    }

    /// Restores state saved by [`Adam::flat_moments`] into an optimizer with
    /// the same part layout.
    pub fn restore(&mut self, step: u64, m: &[f64], v: &[f64]) -> Result<()> {
        let total: usize = self.m.iter().map(Vec::len).sum();
        if m.len() != total || v.len() != total {
            return Err(LabError::Shape(format!(
                "optimizer expects {total} moments, got {} and {}",
                m.len(),
                v.len()
            )));
        }
        let mut off = 0;
        for (mp, vp) in self.m.iter_mut().zip(self.v.iter_mut()) {
            let n = mp.len();
            mp.copy_from_slice(&m[off..off + n]);
            vp.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        self.step = step;
        Ok(())
    }

    /// One bias-corrected update. A non-finite gradient rejects the step and
    /// leaves both parameters and moments untouched.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &GradBundle, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(LabError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let congruent = params.len() == self.m.len()
            && grads.parts.len() == self.m.len()
            && params
                .iter()
                .zip(&self.m)
                .zip(&grads.parts)
                .all(|((p, m), g)| p.len() == m.len() && g.len() == m.len());
        if !congruent {
            return Err(LabError::Shape("optimizer state does not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(LabError::NonFinite("gradient rejected by optimizer".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads.parts)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut MlpParams, grads: &GradBundle, state: &mut Adam, lr: f64) -> Result<()> {
    state.step(params.parts_mut(), grads, lr)
}
