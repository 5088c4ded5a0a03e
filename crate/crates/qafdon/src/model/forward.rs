//! Forward evaluation of the operator model.
//!
//! There are two paths over the same parameters: a plain tensor path for
//! inference (branch output can be cached per trajectory and reused across
//! query times) and a taped path that records the graph for reverse-mode
//! gradients. The two paths apply identical primitive operations in the
//! same order, so they produce bit-identical values.

use super::{MlpLayout, PaddedInput, QafModel, Triplet};
use crate::error::{QafError, Result};
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

impl QafModel {
    /// Output-domain check with a one-ULP-scale tolerance at the horizon,
    /// so grid times built as i·step cannot fall out by float roundoff.
    pub(crate) fn in_output_domain(&self, t: f64) -> bool {
        t > 0.0 && t <= self.config.horizon * (1.0 + 1e-12)
    }

    fn mlp_plain(&self, layout: &MlpLayout, mut x: Tensor) -> Tensor {
        let last = layout.layers.len() - 1;
        for (i, &(w, b)) in layout.layers.iter().enumerate() {
            x = x
                .matmul(&self.params[w].value)
                .and_then(|y| y.add_row_broadcast(&self.params[b].value))
                .expect("layer shapes fixed at construction");
            if i != last {
                x = x.map(f64::tanh);
            }
        }
        x
    }

    /// Random Fourier encoding γ(t) = [sin(Bt), cos(Bt)] as a 1×2M row.
    pub fn fourier_features(&self, t: f64) -> Tensor {
        let rows = self.trunk_b.data();
        let mut out = Vec::with_capacity(2 * rows.len());
        out.extend(rows.iter().map(|b| (b * t).sin()));
        out.extend(rows.iter().map(|b| (b * t).cos()));
        Tensor::row(out)
    }

    fn check_sensor_count(&self, u: &PaddedInput) -> Result<()> {
        if u.values().len() != self.config.m {
            return Err(QafError::Shape(format!(
                "input has {} sensors, model wants {}",
                u.values().len(),
                self.config.m
            )));
        }
        Ok(())
    }

    /// Self-attention output O = softmax(QKᵀ)·V over the embedded input,
    /// exposed for diagnostics.
    pub fn attention_output(&self, u: &PaddedInput) -> Result<Tensor> {
        self.check_sensor_count(u)?;
        let u_col = Tensor::matrix(self.config.m, 1, u.values().to_vec())?;
        let embedded = u_col
            .matmul(&self.params[self.layout.embed_w].value)?
            .add_row_broadcast(&self.params[self.layout.embed_b].value)?;
        let q = embedded.matmul(&self.params[self.layout.wq].value)?;
        let k = embedded.matmul(&self.params[self.layout.wk].value)?;
        let v = embedded.matmul(&self.params[self.layout.wv].value)?;
        let scores = q.matmul_nt(&k)?;
        let attn = if self.config.mask_padding {
            scores.softmax_rows_masked(u.valid_len())
        } else {
            scores.softmax_rows()
        };
        attn.matmul(&v)
    }

    /// Branch network: attention over the embedded input, mean-pool over
    /// time, then MLP to the base basis φ ∈ R^p.
    pub fn branch_forward(&self, u: &PaddedInput) -> Result<Tensor> {
        let attended = self.attention_output(u)?;
        let pooled = if self.config.mask_padding {
            attended.mean_rows_masked(u.valid_len())
        } else {
            attended.mean_rows()
        };
        Ok(self.mlp_plain(&self.layout.branch, pooled))
    }

    /// Trunk network: Fourier features of the query time, then MLP to ψ ∈ R^p.
    ///
    /// The query must lie in (0, horizon]; queries inside a trajectory's
    /// observed window are the caller's responsibility to exclude.
    pub fn trunk_forward(&self, t: f64) -> Result<Tensor> {
        if !self.in_output_domain(t) {
            return Err(QafError::Domain(format!(
                "query time {t} outside (0, {}]",
                self.config.horizon
            )));
        }
        Ok(self.mlp_plain(&self.layout.trunk, self.fourier_features(t)))
    }

    /// Raw quantile pair from already-computed bases. `lo ≤ hi` is not
    /// guaranteed by construction; see [`super::order_fixed`].
    pub fn quantile_bounds(&self, phi: &Tensor, psi: &Tensor) -> Result<(f64, f64)> {
        let phi_b = self.mlp_plain(&self.layout.head_lower_branch, phi.clone());
        let psi_t = self.mlp_plain(&self.layout.head_lower_trunk, psi.clone());
        let phi_t = self.mlp_plain(&self.layout.head_upper_branch, phi.clone());
        let psi_b = self.mlp_plain(&self.layout.head_upper_trunk, psi.clone());
        Ok((phi_b.dot(&psi_t)?, phi_t.dot(&psi_b)?))
    }

    /// Raw (lower, upper) quantile estimates at one query time.
    pub fn predict_quantiles(&self, u: &PaddedInput, t: f64) -> Result<(f64, f64)> {
        let phi = self.branch_forward(u)?;
        let psi = self.trunk_forward(t)?;
        self.quantile_bounds(&phi, &psi)
    }

    /// Inference interval: the raw pair order-fixed to (min, max).
    pub fn predict_interval(&self, u: &PaddedInput, t: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.predict_quantiles(u, t)?;
        Ok(super::order_fixed(lo, hi))
    }

    /// Diagnostic mean head Σ φᵢψᵢ; not part of interval construction.
    pub fn predict_mean(&self, u: &PaddedInput, t: f64) -> Result<f64> {
        let phi = self.branch_forward(u)?;
        let psi = self.trunk_forward(t)?;
        phi.dot(&psi)
    }

    /// Mean joint pinball loss over a batch, without gradients.
    pub fn batch_loss(&self, batch: &[&Triplet]) -> Result<f64> {
        if batch.is_empty() {
            return Err(QafError::Contract("batch_loss needs a nonempty batch".into()));
        }
        let (tau_lo, tau_hi) = self.config.quantile_levels();
        let mut total = 0.0;
        for triplet in batch {
            let (lo, hi) = self.predict_quantiles(&triplet.input, triplet.t)?;
            total += pinball_loss(tau_lo, triplet.target, lo)?;
            total += pinball_loss(tau_hi, triplet.target, hi)?;
        }
        Ok(total / batch.len() as f64)
    }

    fn mlp_taped(
        &self,
        tape: &mut GradTape,
        layout: &MlpLayout,
        leaves: &[NodeId],
        mut x: NodeId,
    ) -> Result<NodeId> {
        let last = layout.layers.len() - 1;
        for (i, &(w, b)) in layout.layers.iter().enumerate() {
            x = tape.matmul(x, leaves[w])?;
            x = tape.add_row_bias(x, leaves[b])?;
            if i != last {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }

    /// Records the joint pinball loss of one batch on `tape`.
    ///
    /// Returns the scalar loss node and the parameter leaf ids in optimizer
    /// order. The Fourier matrix enters as plain data, never as a leaf, so
    /// it can receive no update.
    pub fn batch_loss_graph(
        &self,
        tape: &mut GradTape,
        batch: &[&Triplet],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if batch.is_empty() {
            return Err(QafError::Contract("batch_loss needs a nonempty batch".into()));
        }
        let leaves: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let (tau_lo, tau_hi) = self.config.quantile_levels();

        let mut acc: Option<NodeId> = None;
        for triplet in batch {
            self.check_sensor_count(&triplet.input)?;
            let t = triplet.t;
            if !self.in_output_domain(t) {
                return Err(QafError::Domain(format!(
                    "query time {t} outside (0, {}]",
                    self.config.horizon
                )));
            }

            let u_col = tape.leaf(Tensor::matrix(
                self.config.m,
                1,
                triplet.input.values().to_vec(),
            )?);
            let embedded = {
                let proj = tape.matmul(u_col, leaves[self.layout.embed_w])?;
                tape.add_row_bias(proj, leaves[self.layout.embed_b])?
            };
            let q = tape.matmul(embedded, leaves[self.layout.wq])?;
            let k = tape.matmul(embedded, leaves[self.layout.wk])?;
            let v = tape.matmul(embedded, leaves[self.layout.wv])?;
            let scores = tape.matmul_nt(q, k)?;
            let attn = if self.config.mask_padding {
                tape.softmax_rows_masked(scores, triplet.input.valid_len())
            } else {
                tape.softmax_rows(scores)
            };
            let attended = tape.matmul(attn, v)?;
            let pooled = if self.config.mask_padding {
                tape.mean_rows_masked(attended, triplet.input.valid_len())
            } else {
                tape.mean_rows(attended)
            };
            let phi = self.mlp_taped(tape, &self.layout.branch, &leaves, pooled)?;

            let gamma = tape.leaf(self.fourier_features(t));
            let psi = self.mlp_taped(tape, &self.layout.trunk, &leaves, gamma)?;

            let phi_b = self.mlp_taped(tape, &self.layout.head_lower_branch, &leaves, phi)?;
            let psi_t = self.mlp_taped(tape, &self.layout.head_lower_trunk, &leaves, psi)?;
            let phi_t = self.mlp_taped(tape, &self.layout.head_upper_branch, &leaves, phi)?;
            let psi_b = self.mlp_taped(tape, &self.layout.head_upper_trunk, &leaves, psi)?;
            let lo = tape.dot(phi_b, psi_t)?;
            let hi = tape.dot(phi_t, psi_b)?;

            let loss_lo = tape.pinball(tau_lo, triplet.target, lo)?;
            let loss_hi = tape.pinball(tau_hi, triplet.target, hi)?;
            let both = tape.add(loss_lo, loss_hi)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, both)?,
                None => both,
            });
        }

        let loss = tape.scale(acc.expect("nonempty batch"), 1.0 / batch.len() as f64);
        Ok((loss, leaves))
    }

    /// Loss value plus one gradient tensor per parameter, in optimizer order.
    pub fn batch_loss_and_grads(&self, batch: &[&Triplet]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = GradTape::new();
        let (loss, leaves) = self.batch_loss_graph(&mut tape, batch)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(QafError::Training(format!(
                "batch loss is not finite: {loss_value}"
            )));
        }
        let grads = tape.backward(loss)?;
        Ok((loss_value, leaves.into_iter().map(|id| grads.get(id)).collect()))
    }
}

/// Pinball loss ρ_τ(y, ŷ): τ(y−ŷ) when the target sits above the
/// prediction, (1−τ)(ŷ−y) otherwise. Zero iff y == ŷ.
pub fn pinball_loss(tau: f64, target: f64, prediction: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QafError::Config(format!(
            "pinball quantile level must lie in (0,1), got {tau}"
        )));
    }
    let diff = target - prediction;
    Ok(if diff > 0.0 {
        tau * diff
    } else {
        (1.0 - tau) * (-diff)
    })
}
