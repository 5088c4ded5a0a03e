//! Reverse-mode differentiation on a per-op closure tape.
//!
//! A [`GradTape`] records every primitive as a node holding its value, its
//! parent node ids, and a closure producing the parents' gradient
//! contributions from the upstream gradient. Node ids are issued in
//! construction order, so the node list is already topologically sorted and
//! [`GradTape::backward`] is a single reverse sweep that touches each node
//! exactly once. A leaf that no path reaches keeps a gradient of exactly
//! zero.
//!
//! Tapes are single-owner: one trainer, one tape per forward pass.

use crate::error::{QafError, Result};
use crate::tensor::Tensor;

/// Identifier of a node on one tape. Ids are not portable across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Values handed to a backward closure.
struct BackwardCtx<'a> {
    grad: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

/// Ordered record of primitive ops with their backward rules.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, addressable by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `id`; exactly zero when no path reached it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let shape = &self.shapes[id.0];
                Tensor::new(shape.clone(), vec![0.0; shape.iter().product()])
                    .expect("shape recorded from a valid tensor")
            }
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, backward: Option<BackwardFn>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        id
    }

    /// Registers an input value. Leaves have no backward rule; trainable
    /// parameters are just leaves whose ids the caller keeps.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.clone()])),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| vec![ctx.grad.clone(), ctx.grad.scale(-1.0)])),
        ))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                vec![
                    ctx.grad.hadamard(ctx.inputs[1]).expect("same shape"),
                    ctx.grad.hadamard(ctx.inputs[0]).expect("same shape"),
                ]
            })),
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| vec![ctx.grad.scale(c)])),
        )
    }

    /// C = A·B with dA = dC·Bᵀ and dB = Aᵀ·dC.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                vec![
                    ctx.grad.matmul_nt(ctx.inputs[1]).expect("checked at build"),
                    ctx.inputs[0].matmul_tn(ctx.grad).expect("checked at build"),
                ]
            })),
        ))
    }

    /// C = A·Bᵀ with dA = dC·B and dB = dCᵀ·A.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                vec![
                    ctx.grad.matmul(ctx.inputs[1]).expect("checked at build"),
                    ctx.grad.matmul_tn(ctx.inputs[0]).expect("checked at build"),
                ]
            })),
        ))
    }

    /// Adds a 1×n bias to every row; the bias gradient is the column sum.
    pub fn add_row_bias(&mut self, mat: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.value(mat).add_row_broadcast(self.value(bias))?;
        Ok(self.push(
            value,
            vec![mat, bias],
            Some(Box::new(|ctx| {
                let n = ctx.grad.cols();
                let mut colsum = vec![0.0; n];
                for row in ctx.grad.data().chunks(n) {
                    for (s, &g) in colsum.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                vec![ctx.grad.clone(), Tensor::row(colsum)]
            })),
        ))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let d: Vec<f64> = ctx
                    .output
                    .data()
                    .iter()
                    .zip(ctx.grad.data())
                    .map(|(y, g)| g * (1.0 - y * y))
                    .collect();
                vec![Tensor::new(ctx.output.shape().to_vec(), d).expect("same shape")]
            })),
        )
    }

    /// Row-wise softmax; dx_j = y_j (g_j − Σ_k g_k y_k) per row.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).softmax_rows();
        self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let n = ctx.output.cols();
                let mut d = vec![0.0; ctx.output.len()];
                for (r, (yrow, grow)) in ctx
                    .output
                    .data()
                    .chunks(n)
                    .zip(ctx.grad.data().chunks(n))
                    .enumerate()
                {
                    let s: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[r * n + j] = yrow[j] * (grow[j] - s);
                    }
                }
                vec![Tensor::new(ctx.output.shape().to_vec(), d).expect("same shape")]
            })),
        )
    }

    /// Row-wise softmax over the first `valid` columns; masked columns stay
    /// zero forward and backward.
    pub fn softmax_rows_masked(&mut self, a: NodeId, valid: usize) -> NodeId {
        let value = self.value(a).softmax_rows_masked(valid);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let n = ctx.output.cols();
                let k = valid.min(n).max(1);
                let mut d = vec![0.0; ctx.output.len()];
                for (r, (yrow, grow)) in ctx
                    .output
                    .data()
                    .chunks(n)
                    .zip(ctx.grad.data().chunks(n))
                    .enumerate()
                {
                    let s: f64 = yrow[..k].iter().zip(&grow[..k]).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        d[r * n + j] = yrow[j] * (grow[j] - s);
                    }
                }
                vec![Tensor::new(ctx.output.shape().to_vec(), d).expect("same shape")]
            })),
        )
    }

    /// Column means over the first `valid` rows; the rest receive no gradient.
    pub fn mean_rows_masked(&mut self, a: NodeId, valid: usize) -> NodeId {
        let m = self.value(a).rows();
        let k = valid.min(m).max(1);
        let value = self.value(a).mean_rows_masked(valid);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let n = ctx.grad.cols();
                let scaled: Vec<f64> = ctx.grad.data().iter().map(|g| g / k as f64).collect();
                let mut d = vec![0.0; m * n];
                for row in d.chunks_mut(n).take(k) {
                    row.copy_from_slice(&scaled);
                }
                vec![Tensor::matrix(m, n, d).expect("sized above")]
            })),
        )
    }

    /// Column means over rows: m×n → 1×n.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a).rows();
        let value = self.value(a).mean_rows();
        self.push(
            value,
            vec![a],
            Some(Box::new(move |ctx| {
                let n = ctx.grad.cols();
                let scaled: Vec<f64> = ctx.grad.data().iter().map(|g| g / m as f64).collect();
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend_from_slice(&scaled);
                }
                vec![Tensor::matrix(m, n, d).expect("sized above")]
            })),
        )
    }

    /// Sum of all entries → scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Some(Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                vec![Tensor::new(
                    ctx.inputs[0].shape().to_vec(),
                    vec![g; ctx.inputs[0].len()],
                )
                .expect("sized above")]
            })),
        )
    }

    /// Inner product of same-shape tensors → scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                vec![ctx.inputs[1].scale(g), ctx.inputs[0].scale(g)]
            })),
        ))
    }

    /// Pinball loss ρ_τ(target, pred) for a scalar prediction node.
    /// τ(y−ŷ) when y−ŷ > 0, otherwise (1−τ)(ŷ−y).
    pub fn pinball(&mut self, tau: f64, target: f64, pred: NodeId) -> Result<NodeId> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(QafError::Config(format!(
                "pinball quantile level must lie in (0,1), got {tau}"
            )));
        }
        let yhat = self.value(pred).item()?;
        let diff = target - yhat;
        let loss = if diff > 0.0 {
            tau * diff
        } else {
            (1.0 - tau) * (-diff)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let diff = target - ctx.inputs[0].data()[0];
                // Subgradient 0 at an exact tie keeps perfect predictions a
                // fixed point of training.
                let slope = if diff > 0.0 {
                    -tau
                } else if diff < 0.0 {
                    1.0 - tau
                } else {
                    0.0
                };
                vec![Tensor::scalar(g * slope)]
            })),
        ))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per node;
    /// callers look up the leaf ids they registered.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(QafError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let (Some(grad), Some(back)) = (&grads[i], &node.backward) else {
                continue;
            };
            let ctx = BackwardCtx {
                grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
            };
            let contributions = back(&ctx);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                match &mut grads[parent.0] {
                    Some(acc) => *acc = acc.add(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central finite differences on a leaf, re-running the forward pass.
    fn fd_grad(
        build: impl Fn(&mut GradTape, &[Tensor]) -> NodeId,
        leaves: &[Tensor],
        which: usize,
        h: f64,
    ) -> Tensor {
        let mut out = vec![0.0; leaves[which].len()];
        for k in 0..out.len() {
            let eval = |delta: f64| -> f64 {
                let mut perturbed = leaves.to_vec();
                perturbed[which].data_mut()[k] += delta;
                let mut tape = GradTape::new();
                let loss = build(&mut tape, &perturbed);
                tape.value(loss).item().unwrap()
            };
            out[k] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        Tensor::new(leaves[which].shape().to_vec(), out).unwrap()
    }

    fn assert_grad_close(ad: &Tensor, fd: &Tensor, rtol: f64) {
        for (a, f) in ad.data().iter().zip(fd.data()) {
            let scale = a.abs().max(f.abs()).max(1e-6);
            assert!((a - f).abs() <= rtol * scale, "ad {a} vs fd {f}");
        }
    }

    fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn sum_of_leaf_grad_is_all_ones() {
        let mut tape = GradTape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, -5.0, 6.0]).unwrap());
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_grad_is_w() {
        let mut tape = GradTape::new();
        let w = tape.leaf(Tensor::row(vec![1.5, -0.5, 2.0]));
        let sq = tape.hadamard(w, w).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), tape.value(w).data());
    }

    #[test]
    fn untouched_leaf_gets_exact_zero() {
        let mut tape = GradTape::new();
        let w = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::row(vec![3.0, 4.0]));
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let w = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(QafError::Contract(_))));
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(5, &[100]);

        // matmul chain: sum(tanh(A·B))
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        let build = |tape: &mut GradTape, leaves: &[Tensor]| {
            let a = tape.leaf(leaves[0].clone());
            let b = tape.leaf(leaves[1].clone());
            let c = tape.matmul(a, b).unwrap();
            let t = tape.tanh(c);
            tape.sum_all(t)
        };
        let leaves = vec![a, b];
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let c = tape.matmul(ids[0], ids[1]).unwrap();
        let t = tape.tanh(c);
        let loss = tape.sum_all(t);
        let grads = tape.backward(loss).unwrap();
        for which in 0..2 {
            let fd = fd_grad(build, &leaves, which, 1e-5);
            assert_grad_close(&grads.get(ids[which]), &fd, 1e-4);
        }

        // softmax + matmul_nt + mean_rows + bias + dot + pinball
        let q = random_tensor(&mut rng, 3, 3);
        let k = random_tensor(&mut rng, 3, 3);
        let bias = random_tensor(&mut rng, 1, 3);
        let v = random_tensor(&mut rng, 1, 3);
        let build2 = |tape: &mut GradTape, leaves: &[Tensor]| {
            let q = tape.leaf(leaves[0].clone());
            let k = tape.leaf(leaves[1].clone());
            let bias = tape.leaf(leaves[2].clone());
            let v = tape.leaf(leaves[3].clone());
            let s = tape.matmul_nt(q, k).unwrap();
            let a = tape.softmax_rows(s);
            let pooled = tape.mean_rows(a);
            let shifted = tape.add_row_bias(pooled, bias).unwrap();
            let d = tape.dot(shifted, v).unwrap();
            tape.pinball(0.3, 0.2, d).unwrap()
        };
        let leaves2 = vec![q, k, bias, v];
        let mut tape2 = GradTape::new();
        let ids2: Vec<NodeId> = leaves2.iter().map(|l| tape2.leaf(l.clone())).collect();
        let s = tape2.matmul_nt(ids2[0], ids2[1]).unwrap();
        let a2 = tape2.softmax_rows(s);
        let pooled = tape2.mean_rows(a2);
        let shifted = tape2.add_row_bias(pooled, ids2[2]).unwrap();
        let d = tape2.dot(shifted, ids2[3]).unwrap();
        let loss2 = tape2.pinball(0.3, 0.2, d).unwrap();
        let grads2 = tape2.backward(loss2).unwrap();
        for which in 0..4 {
            let fd = fd_grad(build2, &leaves2, which, 1e-5);
            assert_grad_close(&grads2.get(ids2[which]), &fd, 1e-4);
        }

        // add / sub / scale path
        let x = random_tensor(&mut rng, 2, 2);
        let y = random_tensor(&mut rng, 2, 2);
        let build3 = |tape: &mut GradTape, leaves: &[Tensor]| {
            let x = tape.leaf(leaves[0].clone());
            let y = tape.leaf(leaves[1].clone());
            let sum = tape.add(x, y).unwrap();
            let diff = tape.sub(sum, y).unwrap();
            let scaled = tape.scale(diff, 2.5);
            let prod = tape.hadamard(scaled, x).unwrap();
            tape.sum_all(prod)
        };
        let leaves3 = vec![x, y];
        let mut tape3 = GradTape::new();
        let ids3: Vec<NodeId> = leaves3.iter().map(|l| tape3.leaf(l.clone())).collect();
        let sum = tape3.add(ids3[0], ids3[1]).unwrap();
        let diff = tape3.sub(sum, ids3[1]).unwrap();
        let scaled = tape3.scale(diff, 2.5);
        let prod = tape3.hadamard(scaled, ids3[0]).unwrap();
        let loss3 = tape3.sum_all(prod);
        let grads3 = tape3.backward(loss3).unwrap();
        for which in 0..2 {
            let fd = fd_grad(build3, &leaves3, which, 1e-5);
            assert_grad_close(&grads3.get(ids3[which]), &fd, 1e-4);
        }
    }

    #[test]
    fn pinball_rejects_bad_tau() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        assert!(matches!(tape.pinball(0.0, 1.0, x), Err(QafError::Config(_))));
        assert!(matches!(tape.pinball(1.0, 1.0, x), Err(QafError::Config(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = crate::rng::stream(6, &[7]);
        let a = random_tensor(&mut rng, 4, 4);
        let run = || {
            let mut tape = GradTape::new();
            let x = tape.leaf(a.clone());
            let s = tape.softmax_rows(x);
            let m = tape.mean_rows(s);
            let loss = tape.sum_all(m);
            let grads = tape.backward(loss).unwrap();
            grads.get(x).data().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2, "same inputs must give bit-identical gradients");
    }
}
