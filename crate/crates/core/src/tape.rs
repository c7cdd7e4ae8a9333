//! Reverse-mode differentiation over a define-by-run tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients via the chain rule. The
//! tape is rebuilt for every training step, which keeps variable-length
//! rollouts trivial at the cost of some allocation churn.
//!
//! Shape misuse is a programming error, not a runtime condition: tape methods
//! panic with messages naming both shapes. Fallible, `Result`-returning shape
//! checks live on [`Tensor`](crate::tensor::Tensor) and in the module-level
//! entry points that consume external data.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `x + b` with `b` a single row broadcast over every row of `x`.
    AddRowBias { x: NodeId, bias: NodeId },
    /// Row `i` of `x` scaled by the scalar `s[i]`; `s` has shape `[n, 1]`.
    ScaleRows { x: NodeId, s: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Elu { x: NodeId },
    Relu { x: NodeId },
    Log { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize },
    SumAll { x: NodeId },
    Reshape { x: NodeId },
    /// Per-column standardization by the within-call batch statistics.
    BatchNormCols { x: NodeId, inv_sigma: Vec<f64> },
    /// Mask entries are 0 or 1/(1-rate), fixed at recording time.
    Dropout { x: NodeId, mask: Arc<Vec<f64>> },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    ScatterAddRows { x: NodeId, idx: Arc<Vec<usize>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass. Nodes that do not lie on a
/// path to the loss have no stored gradient and read back as all-zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
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

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on node of shape {:?}", v.shape());
        v.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input: participates in the forward pass, receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert!(
            va.rank() == 2 && vb.rank() == 2 && va.shape()[1] == vb.shape()[0],
            "matmul: dimension mismatch between {:?} and {:?}",
            va.shape(),
            vb.shape()
        );
        let (m, k) = va.dims2();
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(vec![m, n], out).unwrap(),
            Op::Matmul { a, b },
            needs,
        )
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "{}: dimension mismatch between {:?} and {:?}",
            name,
            va.shape(),
            vb.shape()
        );
        Tensor::from_vec(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
        .unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "add", |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "sub", |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul { a, b }, needs)
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let vb = self.value(bias);
        let (n, f) = vx.dims2();
        assert_eq!(
            vb.shape(),
            &[1, f],
            "add_row_bias: dimension mismatch between {:?} and {:?}",
            vx.shape(),
            vb.shape()
        );
        let mut data = vx.data().to_vec();
        for i in 0..n {
            for j in 0..f {
                data[i * f + j] += vb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(
            Tensor::from_vec(vec![n, f], data).unwrap(),
            Op::AddRowBias { x, bias },
            needs,
        )
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let vx = self.value(x);
        let vs = self.value(s);
        let (n, f) = vx.dims2();
        assert_eq!(
            vs.shape(),
            &[n, 1],
            "scale_rows: dimension mismatch between {:?} and {:?}",
            vx.shape(),
            vs.shape()
        );
        let mut data = vx.data().to_vec();
        for i in 0..n {
            let w = vs.data()[i];
            for j in 0..f {
                data[i * f + j] *= w;
            }
        }
        let needs = self.needs(x) || self.needs(s);
        self.push(
            Tensor::from_vec(vec![n, f], data).unwrap(),
            Op::ScaleRows { x, s },
            needs,
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        let needs = self.needs(x);
        self.push(v, Op::Scale { x, c }, needs)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|t| t + c);
        let needs = self.needs(x);
        self.push(v, Op::AddConst { x }, needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        let needs = self.needs(x);
        self.push(v, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid { x }, needs)
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { t.exp() - 1.0 });
        let needs = self.needs(x);
        self.push(v, Op::Elu { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.max(0.0));
        let needs = self.needs(x);
        self.push(v, Op::Relu { x }, needs)
    }

    /// Natural log; defined for strictly positive inputs (softmax outputs).
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        let needs = self.needs(x);
        self.push(v, Op::Log { x }, needs)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self
            .value(x)
            .softmax(axis)
            .unwrap_or_else(|e| panic!("softmax: {e}"));
        let needs = self.needs(x);
        self.push(v, Op::Softmax { x, axis }, needs)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        assert!(axis < 2, "concat supports rank-2 tensors");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        let other = 1 - axis;
        for s in &shapes {
            assert_eq!(s.len(), 2, "concat supports rank-2 tensors, got {:?}", s);
            assert_eq!(
                s[other], shapes[0][other],
                "concat: dimension mismatch between {:?} and {:?}",
                shapes[0], s
            );
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut shape = shapes[0].clone();
        shape[axis] = total;
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; rows * cols];
        if axis == 0 {
            let mut at = 0;
            for &p in parts {
                let v = self.value(p);
                data[at..at + v.len()].copy_from_slice(v.data());
                at += v.len();
            }
        } else {
            let mut col_at = 0;
            for &p in parts {
                let v = self.value(p);
                let w = v.shape()[1];
                for r in 0..rows {
                    data[r * cols + col_at..r * cols + col_at + w]
                        .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
                col_at += w;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_vec(shape, data).unwrap(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis` of a rank-2 tensor.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.dims2();
        assert!(axis < 2 && start + len <= v.shape()[axis], "narrow out of range");
        let out = if axis == 0 {
            Tensor::from_vec(
                vec![len, cols],
                v.data()[start * cols..(start + len) * cols].to_vec(),
            )
            .unwrap()
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::from_vec(vec![rows, len], data).unwrap()
        };
        let needs = self.needs(x);
        self.push(out, Op::Narrow { x, axis, start }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(v, Op::SumAll { x }, needs)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self
            .value(x)
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let needs = self.needs(x);
        self.push(v, Op::Reshape { x }, needs)
    }

    /// Standardizes each column to zero mean and unit variance using the
    /// statistics of this call's rows (biased variance, `+eps` in the root).
    pub fn batch_norm_cols(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = self.value(x);
        let (n, f) = v.dims2();
        assert!(n > 0, "batch_norm_cols on empty tensor");
        let mut out = vec![0.0; n * f];
        let mut inv_sigma = vec![0.0; f];
        for j in 0..f {
            let mut mean = 0.0;
            for i in 0..n {
                mean += v.data()[i * f + j];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = v.data()[i * f + j] - mean;
                var += d * d;
            }
            var /= n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[j] = inv;
            for i in 0..n {
                out[i * f + j] = (v.data()[i * f + j] - mean) * inv;
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![n, f], out).unwrap(),
            Op::BatchNormCols { x, inv_sigma },
            needs,
        )
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1/(1-rate)`. The mask is drawn once at recording time, so
    /// replaying with the same rng state reproduces it bit for bit. Evaluation
    /// paths simply skip this op.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} out of [0,1)");
        if rate == 0.0 {
            return x;
        }
        let v = self.value(x);
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(v.shape().to_vec(), data).unwrap(),
            Op::Dropout {
                x,
                mask: Arc::new(mask),
            },
            needs,
        )
    }

    /// `out[i, :] = x[idx[i], :]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let v = self.value(x);
        let (n, f) = v.dims2();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx.iter() {
            assert!(i < n, "gather_rows: row {i} out of {n}");
            data.extend_from_slice(&v.data()[i * f..(i + 1) * f]);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![idx.len(), f], data).unwrap(),
            Op::GatherRows { x, idx },
            needs,
        )
    }

    /// `out[idx[i], :] += x[i, :]` into a fresh `[rows, f]` zero tensor.
    pub fn scatter_add_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>, rows: usize) -> NodeId {
        let v = self.value(x);
        let (n, f) = v.dims2();
        assert_eq!(n, idx.len(), "scatter_add_rows: {} rows, {} indices", n, idx.len());
        let mut data = vec![0.0; rows * f];
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "scatter_add_rows: target row {r} out of {rows}");
            for j in 0..f {
                data[r * f + j] += v.data()[i * f + j];
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(vec![rows, f], data).unwrap(),
            Op::ScatterAddRows { x, idx },
            needs,
        )
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate only along
    /// paths that reach differentiable leaves.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward from non-scalar node of shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            self.accumulate(i, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, contrib_shape: &[usize], f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(contrib_shape.to_vec()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let g = grad.data();

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2();
                let n = vb.shape()[1];
                if needs(*a) {
                    // dA = G @ B^T
                    let bt = vb.transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    add_to(grads, *a, va.shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                }
                if needs(*b) {
                    // dB = A^T @ G
                    let at = va.transpose();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    add_to(grads, *b, vb.shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    if needs(*p) {
                        add_to(grads, *p, self.value(*p).shape(), &mut |dst| {
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += s;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    add_to(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if needs(*b) {
                    add_to(grads, *b, self.value(*b).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d -= s;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if needs(*a) {
                    add_to(grads, *a, va.shape(), &mut |dst| {
                        for ((d, s), &y) in dst.iter_mut().zip(g).zip(vb.data()) {
                            *d += s * y;
                        }
                    });
                }
                if needs(*b) {
                    add_to(grads, *b, vb.shape(), &mut |dst| {
                        for ((d, s), &x) in dst.iter_mut().zip(g).zip(va.data()) {
                            *d += s * x;
                        }
                    });
                }
            }
            Op::AddRowBias { x, bias } => {
                let (n, f) = self.value(*x).dims2();
                if needs(*x) {
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if needs(*bias) {
                    add_to(grads, *bias, self.value(*bias).shape(), &mut |dst| {
                        for i in 0..n {
                            for j in 0..f {
                                dst[j] += g[i * f + j];
                            }
                        }
                    });
                }
            }
            Op::ScaleRows { x, s } => {
                let vx = self.value(*x);
                let vs = self.value(*s);
                let (n, f) = vx.dims2();
                if needs(*x) {
                    add_to(grads, *x, vx.shape(), &mut |dst| {
                        for i in 0..n {
                            let w = vs.data()[i];
                            for j in 0..f {
                                dst[i * f + j] += g[i * f + j] * w;
                            }
                        }
                    });
                }
                if needs(*s) {
                    add_to(grads, *s, vs.shape(), &mut |dst| {
                        for i in 0..n {
                            let mut acc = 0.0;
                            for j in 0..f {
                                acc += g[i * f + j] * vx.data()[i * f + j];
                            }
                            dst[i] += acc;
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if needs(*x) {
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s * c;
                        }
                    });
                }
            }
            Op::AddConst { x } => {
                if needs(*x) {
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Tanh { x } => {
                if needs(*x) {
                    let y = self.nodes[i].value.data();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for ((d, s), &t) in dst.iter_mut().zip(g).zip(y) {
                            *d += s * (1.0 - t * t);
                        }
                    });
                }
            }
            Op::Sigmoid { x } => {
                if needs(*x) {
                    let y = self.nodes[i].value.data();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for ((d, s), &t) in dst.iter_mut().zip(g).zip(y) {
                            *d += s * t * (1.0 - t);
                        }
                    });
                }
            }
            Op::Elu { x } => {
                if needs(*x) {
                    let vx = self.value(*x).data();
                    let y = self.nodes[i].value.data();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for k in 0..dst.len() {
                            let slope = if vx[k] > 0.0 { 1.0 } else { y[k] + 1.0 };
                            dst[k] += g[k] * slope;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let vx = self.value(*x).data();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for k in 0..dst.len() {
                            if vx[k] > 0.0 {
                                dst[k] += g[k];
                            }
                        }
                    });
                }
            }
            Op::Log { x } => {
                if needs(*x) {
                    let vx = self.value(*x).data();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for k in 0..dst.len() {
                            dst[k] += g[k] / vx[k];
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let y = self.nodes[i].value.clone();
                    let axis = *axis;
                    let axis_len = y.shape()[axis];
                    let inner: usize = y.shape()[axis + 1..].iter().product();
                    let outer: usize = y.shape()[..axis].iter().product();
                    add_to(grads, *x, y.shape(), &mut |dst| {
                        for o in 0..outer {
                            for ii in 0..inner {
                                let base = o * axis_len * inner + ii;
                                let mut dot = 0.0;
                                for a in 0..axis_len {
                                    let k = base + a * inner;
                                    dot += g[k] * y.data()[k];
                                }
                                for a in 0..axis_len {
                                    let k = base + a * inner;
                                    dst[k] += y.data()[k] * (g[k] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let cols = self.nodes[i].value.shape()[1];
                let mut at = 0;
                for &p in parts {
                    let v = self.value(p);
                    let span = v.shape()[*axis];
                    if needs(p) {
                        let (pr, pc) = v.dims2();
                        let offset = at;
                        let axis_v = *axis;
                        add_to(grads, p, v.shape(), &mut |dst| {
                            if axis_v == 0 {
                                let start = offset * cols;
                                for k in 0..pr * pc {
                                    dst[k] += g[start + k];
                                }
                            } else {
                                for r in 0..pr {
                                    for c in 0..pc {
                                        dst[r * pc + c] += g[r * cols + offset + c];
                                    }
                                }
                            }
                        });
                    }
                    at += span;
                }
            }
            Op::Narrow { x, axis, start } => {
                if needs(*x) {
                    let v = self.value(*x);
                    let (_, cols) = v.dims2();
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (orows, ocols) = (out_shape[0], out_shape[1]);
                    let (axis, start) = (*axis, *start);
                    add_to(grads, *x, v.shape(), &mut |dst| {
                        if axis == 0 {
                            let base = start * cols;
                            for k in 0..orows * ocols {
                                dst[base + k] += g[k];
                            }
                        } else {
                            for r in 0..orows {
                                for c in 0..ocols {
                                    dst[r * cols + start + c] += g[r * ocols + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                if needs(*x) {
                    let s = g[0];
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for d in dst.iter_mut() {
                            *d += s;
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if needs(*x) {
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::BatchNormCols { x, inv_sigma } => {
                if needs(*x) {
                    let y = self.nodes[i].value.clone();
                    let (n, f) = y.dims2();
                    let nf = n as f64;
                    add_to(grads, *x, y.shape(), &mut |dst| {
                        for j in 0..f {
                            let mut g_mean = 0.0;
                            let mut gy_mean = 0.0;
                            for r in 0..n {
                                let k = r * f + j;
                                g_mean += g[k];
                                gy_mean += g[k] * y.data()[k];
                            }
                            g_mean /= nf;
                            gy_mean /= nf;
                            for r in 0..n {
                                let k = r * f + j;
                                dst[k] += inv_sigma[j] * (g[k] - g_mean - y.data()[k] * gy_mean);
                            }
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    let mask = mask.clone();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for ((d, s), &m) in dst.iter_mut().zip(g).zip(mask.iter()) {
                            *d += s * m;
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let f = self.value(*x).shape()[1];
                    let idx = idx.clone();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for (i_out, &r) in idx.iter().enumerate() {
                            for c in 0..f {
                                dst[r * f + c] += g[i_out * f + c];
                            }
                        }
                    });
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if needs(*x) {
                    let f = self.value(*x).shape()[1];
                    let idx = idx.clone();
                    add_to(grads, *x, self.value(*x).shape(), &mut |dst| {
                        for (i_in, &r) in idx.iter().enumerate() {
                            for c in 0..f {
                                dst[i_in * f + c] += g[r * f + c];
                            }
                        }
                    });
                }
            }
        }
    }
}
