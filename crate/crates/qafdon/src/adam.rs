//! Adam optimizer with bias correction, operating on an aligned list of
//! parameter tensors.

use crate::error::{QafError, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with zero moments shaped after `sizes` (one entry per
    /// parameter tensor, in optimizer order).
    pub fn new(params: AdamParams, sizes: &[usize]) -> Self {
        Self {
            params,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drops accumulated moments and the step count, keeping hyperparameters.
    pub fn reset(&mut self) {
        self.step = 0;
        for m in &mut self.m {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
        for v in &mut self.v {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One bias-corrected Adam update. `names` label parameters in error
    /// messages when a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(QafError::Contract(format!(
                "adam step wants {} parameter tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(QafError::Training(format!(
                    "non-finite gradient for parameter '{}'",
                    names(i)
                )));
            }
        }

        self.step += 1;
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.len(), g.len());
            let p: &mut Tensor = p;
            for ((w, &grad), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * grad;
                *vi = beta2 * *vi + (1.0 - beta2) * grad * grad;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
