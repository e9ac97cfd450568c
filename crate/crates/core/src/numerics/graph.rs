//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once in reverse.

use super::kernels::{self, ConvParams};
use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth activation used throughout the network: `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Silu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        /// Softmax probabilities `[b, lq, lk]`.
        probs: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    RowNormMean(NodeId),
    Reshape(NodeId),
    Transpose12(NodeId),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    StopGradient,
    StraightThrough(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation graph. Build it with the op methods, then
/// call [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `id`, or `None` when the node does not require grad or
    /// does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        node_op: Op,
        requires_grad: bool,
    ) -> Result<NodeId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(format!("output of {op}")));
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn any_grad(&self, ids: &[Option<NodeId>]) -> bool {
        ids.iter().flatten().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    ) -> Result<NodeId, NumericsError> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            params,
        )?;
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
            rg,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    ) -> Result<NodeId, NumericsError> {
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            params,
        )?;
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        self.push(
            "conv_transpose2d",
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                params,
            },
            rg,
        )
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId, NumericsError> {
        let out = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        self.push("linear", out, Op::Linear { input, weight, bias }, rg)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let out = self.value(x).map(silu);
        let rg = self.requires_grad(x);
        self.push("silu", out, Op::Silu(x), rg)
    }

    /// `softmax(q k^T / sqrt(d)) v` for `q: [b, lq, d]`, `k: [b, lk, d]`,
    /// `v: [b, lk, dv]`.
    pub fn scaled_dot_attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        const OP: &str = "scaled_dot_attention";
        let (qs, ks, vs) = (self.value(q).shape(), self.value(k).shape(), self.value(v).shape());
        let (b, lq, d, lk, dv) = match (qs, ks, vs) {
            ([b, lq, d], [b2, lk, d2], [b3, lk2, dv]) if b == b2 && b == b3 && d == d2 && lk == lk2 => {
                (*b, *lq, *d, *lk, *dv)
            }
            ([_, _, _], [_, _, _], _) => return Err(NumericsError::mismatch(OP, ks, vs)),
            _ => return Err(NumericsError::mismatch(OP, qs, ks)),
        };
        let scale = 1.0 / (d as f64).sqrt();
        let kt = kernels::transpose_last2(self.value(k).data(), b, lk, d);
        let mut probs = kernels::bmm(self.value(q).data(), &kt, b, lq, d, lk);
        for row in probs.chunks_mut(lk) {
            let mut max = f64::NEG_INFINITY;
            for s in row.iter_mut() {
                *s *= scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let out = kernels::bmm(&probs, self.value(v).data(), b, lq, lk, dv);
        let out = Tensor::new(vec![b, lq, dv], out)?;
        let rg = self.any_grad(&[Some(q), Some(k), Some(v)]);
        self.push(OP, out, Op::Attention { q, k, v, probs }, rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("elementwise_add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push("elementwise_add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("elementwise_sub", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(bv) {
            *x -= y;
        }
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push("elementwise_sub", out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.requires_grad(a);
        self.push("scale", out, Op::Scale(a, factor), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.requires_grad(a);
        self.push("mean", out, Op::Mean(a), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / av.len() as f64);
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push("mse", out, Op::Mse(a, b), rg)
    }

    /// Mean over rows of the Euclidean norm of each row (last axis).
    pub fn row_norm_mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap();
        let rows = t.numel() / d;
        let total: f64 = t
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        let out = Tensor::scalar(total / rows as f64);
        let rg = self.requires_grad(a);
        self.push("row_norm_mean", out, Op::RowNormMean(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let out = self
            .value(a)
            .reshape(shape)
            .map_err(|_| NumericsError::mismatch("reshape", self.value(a).shape(), shape))?;
        let rg = self.requires_grad(a);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    /// `[b, n, m] -> [b, m, n]`.
    pub fn transpose12(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        let (b, n, m) = match *t.shape() {
            [b, n, m] => (b, n, m),
            _ => {
                return Err(NumericsError::Shape {
                    op: "transpose12",
                    detail: format!("expected a 3-d tensor, got {:?}", t.shape()),
                })
            }
        };
        let out = Tensor::new(vec![b, m, n], kernels::transpose_last2(t.data(), b, n, m))?;
        let rg = self.requires_grad(a);
        self.push("transpose12", out, Op::Transpose12(a), rg)
    }

    /// Rows `ids` of a `[rows, d]` table, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let t = self.value(table);
        let (rows, d) = match *t.shape() {
            [r, d] => (r, d),
            _ => {
                return Err(NumericsError::Shape {
                    op: "gather_rows",
                    detail: format!("expected a 2-d table, got {:?}", t.shape()),
                })
            }
        };
        if ids.is_empty() {
            return Err(NumericsError::InvalidArgument("gather_rows: no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::InvalidArgument(format!(
                "gather_rows: id {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * d..][..d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires_grad(table);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Forward value is `replacement`; backward hands the incoming gradient
    /// to `a` unchanged.
    pub fn straight_through(&mut self, a: NodeId, replacement: Tensor) -> Result<NodeId, NumericsError> {
        if replacement.shape() != self.value(a).shape() {
            return Err(NumericsError::mismatch(
                "straight_through",
                self.value(a).shape(),
                replacement.shape(),
            ));
        }
        let rg = self.requires_grad(a);
        self.push("straight_through", replacement, Op::StraightThrough(a), rg)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            } => {
                let (gx, gw, gb) = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *params);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                params,
            } => {
                let (gx, gw, gb) =
                    kernels::conv_transpose2d_backward(self.value(*input), self.value(*weight), g, *params);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (gx, gw, gb) = kernels::linear_backward(self.value(*input), self.value(*weight), g);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * silu_grad(x))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::Attention { q, k, v, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (b, lq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let (lk, dv) = (kv.shape()[1], vv.shape()[2]);
                let scale = 1.0 / (d as f64).sqrt();
                // dV = P^T dO
                let pt = kernels::transpose_last2(probs, b, lq, lk);
                let gv = kernels::bmm(&pt, g.data(), b, lk, lq, dv);
                // dP = dO V^T
                let vt = kernels::transpose_last2(vv.data(), b, lk, dv);
                let mut ds = kernels::bmm(g.data(), &vt, b, lq, dv, lk);
                // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(d) scale
                for (drow, prow) in ds.chunks_mut(lk).zip(probs.chunks(lk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, p) in drow.iter_mut().zip(prow) {
                        *dv = p * (*dv - dot) * scale;
                    }
                }
                let gq = kernels::bmm(&ds, kv.data(), b, lq, lk, d);
                let dst = kernels::transpose_last2(&ds, b, lq, lk);
                let gk = kernels::bmm(&dst, qv.data(), b, lk, lq, d);
                self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), gq).expect("shape"));
                self.accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), gk).expect("shape"));
                self.accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), gv).expect("shape"));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.item() / t.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), gv));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.item() / av.numel() as f64;
                let ga: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| c * (x - y)).collect();
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb).expect("shape"));
            }
            Op::RowNormMean(a) => {
                let t = self.value(*a);
                let d = *t.shape().last().unwrap();
                let rows = t.numel() / d;
                let c = g.item() / rows as f64;
                let mut ga = vec![0.0; t.numel()];
                for (src, dst) in t.data().chunks(d).zip(ga.chunks_mut(d)) {
                    let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
                    // subgradient 0 at the origin
                    if norm > 0.0 {
                        for (s, o) in src.iter().zip(dst.iter_mut()) {
                            *o = c * s / norm;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), ga).expect("shape"));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape).expect("shape"));
            }
            Op::Transpose12(a) => {
                let s = out.shape();
                let data = kernels::transpose_last2(g.data(), s[0], s[1], s[2]);
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, data).expect("shape"));
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut gt = Tensor::zeros(t.shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, src) in gt.data_mut()[i * d..][..d].iter_mut().zip(&g.data()[r * d..][..d]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_self_distance_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0));
        let loss = g.mse(x, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_of_scaled_input() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[5], |i| i as f64));
        let y = g.scale(x, 2.0).unwrap();
        let loss = g.mean(y).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!((v - 2.0 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let y = g.silu(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let x = g.param(Tensor::from_fn(&[2, 2], |i| i as f64));
        let rows = g.gather_rows(table, &[1, 3]).unwrap();
        let loss = g.mse(rows, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(table).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[3], |i| i as f64 + 1.0));
        let s = g.stop_gradient(x);
        let y = g.add(x, s).unwrap();
        let loss = g.mean(y).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("elementwise_add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"));
    }
}
