//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the tape
//! in reverse and accumulates gradients with fixed loop order, so a given
//! graph always produces bit-identical gradients. The op set is exactly what
//! the promptable model and its losses need; every backward rule is verified
//! against central finite differences in this module's tests.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Sparse linear map: `out[row] += weight * in[col]`, applied in entry order.
/// Covers bilinear resizing (and any other fixed linear resampling).
#[derive(Debug)]
pub struct SparseMap {
    pub entries: Vec<(u32, u32, f64)>,
    pub in_len: usize,
    pub out_len: usize,
}

enum Op<S: Scalar> {
    Leaf {
        requires_grad: bool,
    },
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// `x [..., d] + row [d]`.
    AddRow(NodeId, NodeId),
    /// `x [..., d] * row [d]`.
    MulRow(NodeId, NodeId),
    Scale(NodeId, S),
    /// `[m,k] x [k,n]`.
    MatMul(NodeId, NodeId),
    /// `[b,m,k] x [b,k,n]`.
    BatchMatMul(NodeId, NodeId),
    /// Swap the last two axes of a 2-D or 3-D tensor.
    TransposeLast(NodeId),
    Reshape(NodeId),
    /// `out[i] = in[index[i]]`; duplication allowed.
    Gather(NodeId, Rc<Vec<u32>>),
    SparseLinear(NodeId, Rc<SparseMap>),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Normalize the last axis to zero mean / unit variance (no affine).
    LayerNorm(NodeId, S),
    Gelu(NodeId),
    /// Mean binary cross-entropy with logits against a constant target.
    BceWithLogits(NodeId, Rc<Vec<S>>),
    /// Soft Dice loss of `sigmoid(logits)` against a constant target.
    SoftDice(NodeId, Rc<Vec<S>>, S),
    /// Maximum of scalar nodes; gradient flows to the stored argmax only.
    MaxOf(Vec<NodeId>, usize),
    /// Sum of scalar nodes.
    SumOf(Vec<NodeId>),
    /// Stack 2-D blocks along axis 0.
    ConcatRows(Vec<NodeId>),
    /// Rows `[start, start+len)` of a 2-D tensor.
    SliceRows(NodeId, usize, usize),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. the node, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient with zeros substituted for unreached nodes.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let d = *vx.shape().last().unwrap();
        debug_assert_eq!(vr.shape(), &[d]);
        let mut data = vx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vr.data()[i % d];
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let d = *vx.shape().last().unwrap();
        debug_assert_eq!(vr.shape(), &[d]);
        let mut data = vx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= vr.data()[i % d];
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = matmul2(va, vb);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = batch_matmul3(va, vb);
        self.push(value, Op::BatchMatMul(a, b))
    }

    pub fn transpose_last(&mut self, x: NodeId) -> NodeId {
        let value = transpose_last(&self.nodes[x.0].value);
        self.push(value, Op::TransposeLast(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.nodes[x.0].value.reshaped(shape).unwrap();
        self.push(value, Op::Reshape(x))
    }

    pub fn gather(&mut self, x: NodeId, index: Rc<Vec<u32>>, out_shape: Vec<usize>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        debug_assert_eq!(out_shape.iter().product::<usize>(), index.len());
        let data = index.iter().map(|&i| vx.data()[i as usize]).collect();
        let value = Tensor::new(out_shape, data).unwrap();
        self.push(value, Op::Gather(x, index))
    }

    pub fn sparse_linear(&mut self, x: NodeId, map: Rc<SparseMap>, out_shape: Vec<usize>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        debug_assert_eq!(vx.numel(), map.in_len);
        debug_assert_eq!(out_shape.iter().product::<usize>(), map.out_len);
        let mut data = vec![S::zero(); map.out_len];
        for &(o, i, w) in &map.entries {
            data[o as usize] += S::from_f64(w) * vx.data()[i as usize];
        }
        let value = Tensor::new(out_shape, data).unwrap();
        self.push(value, Op::SparseLinear(x, map))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().unwrap();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, eps: S) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().unwrap();
        let nd = S::from_f64(d as f64);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let mut mean = S::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean /= nd;
            let mut var = S::zero();
            for &v in row.iter() {
                let c = v - mean;
                var += c * c;
            }
            var /= nd;
            let rstd = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::LayerNorm(x, eps))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data = vx.data().iter().map(|&v| gelu_value(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        self.push(value, Op::Gelu(x))
    }

    /// Mean pixelwise BCE-with-logits against `target` (values 0/1), in the
    /// stable logit form `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: Rc<Vec<S>>) -> NodeId {
        let vz = &self.nodes[logits.0].value;
        debug_assert_eq!(vz.numel(), target.len());
        let n = S::from_f64(target.len() as f64);
        let mut total = S::zero();
        for (&z, &t) in vz.data().iter().zip(target.iter()) {
            total += z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / n);
        self.push(value, Op::BceWithLogits(logits, target))
    }

    /// Soft Dice loss `1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps)` with
    /// `p = sigmoid(logits)` and constant binary `target`.
    pub fn soft_dice(&mut self, logits: NodeId, target: Rc<Vec<S>>, eps: S) -> NodeId {
        let vz = &self.nodes[logits.0].value;
        debug_assert_eq!(vz.numel(), target.len());
        let mut inter = S::zero();
        let mut psum = S::zero();
        let mut tsum = S::zero();
        for (&z, &t) in vz.data().iter().zip(target.iter()) {
            let p = sigmoid(z);
            inter += p * t;
            psum += p;
            tsum += t;
        }
        let num = S::from_f64(2.0) * inter + eps;
        let den = psum + tsum + eps;
        let value = Tensor::scalar(S::one() - num / den);
        self.push(value, Op::SoftDice(logits, target, eps))
    }

    /// Maximum of scalar nodes. Ties select the smallest index, and the
    /// gradient flows only to the selected input. Returns (node, argmax).
    pub fn max_of(&mut self, inputs: Vec<NodeId>) -> (NodeId, usize) {
        debug_assert!(!inputs.is_empty());
        let mut argmax = 0usize;
        let mut best = self.nodes[inputs[0].0].value.item();
        for (i, id) in inputs.iter().enumerate().skip(1) {
            let v = self.nodes[id.0].value.item();
            if v > best {
                best = v;
                argmax = i;
            }
        }
        let id = self.push(Tensor::scalar(best), Op::MaxOf(inputs, argmax));
        (id, argmax)
    }

    pub fn sum_of(&mut self, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(!inputs.is_empty());
        let mut total = S::zero();
        for id in &inputs {
            total += self.nodes[id.0].value.item();
        }
        self.push(Tensor::scalar(total), Op::SumOf(inputs))
    }

    /// Stack 2-D inputs with equal column counts along axis 0.
    pub fn concat_rows(&mut self, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(!inputs.is_empty());
        let cols = self.nodes[inputs[0].0].value.shape()[1];
        let mut rows = 0usize;
        let mut data = Vec::new();
        for id in &inputs {
            let v = &self.nodes[id.0].value;
            debug_assert_eq!(v.shape().len(), 2);
            debug_assert_eq!(v.shape()[1], cols);
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data).unwrap();
        self.push(value, Op::ConcatRows(inputs))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        debug_assert_eq!(vx.shape().len(), 2);
        let cols = vx.shape()[1];
        let data = vx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data).unwrap();
        self.push(value, Op::SliceRows(x, start, len))
    }

    /// Reverse pass from a scalar root. Gradient accumulation order is the
    /// fixed reverse tape order, so results are reproducible bit-for-bit.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward root",
                "scalar",
                format!("{:?}", self.nodes[root.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                let d = self.nodes[row.0].value.numel();
                let mut gr = vec![S::zero(); d];
                for (i, &v) in g.data().iter().enumerate() {
                    gr[i % d] += v;
                }
                Self::accumulate(grads, *x, g.clone());
                Self::accumulate(grads, *row, Tensor::new(vec![d], gr).unwrap());
            }
            Op::MulRow(x, row) => {
                let vx = &self.nodes[x.0].value;
                let vr = &self.nodes[row.0].value;
                let d = vr.numel();
                let mut gx = g.data().to_vec();
                let mut gr = vec![S::zero(); d];
                for (i, gi) in gx.iter_mut().enumerate() {
                    gr[i % d] += *gi * vx.data()[i];
                    *gi *= vr.data()[i % d];
                }
                Self::accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
                Self::accumulate(grads, *row, Tensor::new(vec![d], gr).unwrap());
            }
            Op::Scale(x, c) => {
                let data = g.data().iter().map(|&v| v * *c).collect();
                let gx = Tensor::new(g.shape().to_vec(), data).unwrap();
                Self::accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                // dA = G B^T, dB = A^T G
                let bt = transpose_last(vb);
                let at = transpose_last(va);
                Self::accumulate(grads, *a, matmul2(g, &bt));
                Self::accumulate(grads, *b, matmul2(&at, g));
            }
            Op::BatchMatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let bt = transpose_last(vb);
                let at = transpose_last(va);
                Self::accumulate(grads, *a, batch_matmul3(g, &bt));
                Self::accumulate(grads, *b, batch_matmul3(&at, g));
            }
            Op::TransposeLast(x) => {
                Self::accumulate(grads, *x, transpose_last(g));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                Self::accumulate(grads, *x, g.reshaped(shape).unwrap());
            }
            Op::Gather(x, index) => {
                let vx = &self.nodes[x.0].value;
                let mut gx = vec![S::zero(); vx.numel()];
                for (i, &src) in index.iter().enumerate() {
                    gx[src as usize] += g.data()[i];
                }
                Self::accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
            }
            Op::SparseLinear(x, map) => {
                let vx = &self.nodes[x.0].value;
                let mut gx = vec![S::zero(); map.in_len];
                for &(o, i, w) in &map.entries {
                    gx[i as usize] += S::from_f64(w) * g.data()[o as usize];
                }
                Self::accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
            }
            Op::Softmax(x) => {
                let y = &self.nodes[idx].value;
                let d = *y.shape().last().unwrap();
                let mut gx = vec![S::zero(); y.numel()];
                for r in 0..y.numel() / d {
                    let ys = &y.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot += ys[j] * gs[j];
                    }
                    for j in 0..d {
                        gx[r * d + j] = (gs[j] - dot) * ys[j];
                    }
                }
                let shape = self.nodes[x.0].value.shape().to_vec();
                Self::accumulate(grads, *x, Tensor::new(shape, gx).unwrap());
            }
            Op::LayerNorm(x, eps) => {
                let vx = &self.nodes[x.0].value;
                let y = &self.nodes[idx].value;
                let d = *vx.shape().last().unwrap();
                let nd = S::from_f64(d as f64);
                let mut gx = vec![S::zero(); vx.numel()];
                for r in 0..vx.numel() / d {
                    let xs = &vx.data()[r * d..(r + 1) * d];
                    let ys = &y.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let mut mean = S::zero();
                    for &v in xs {
                        mean += v;
                    }
                    mean /= nd;
                    let mut var = S::zero();
                    for &v in xs {
                        let c = v - mean;
                        var += c * c;
                    }
                    var /= nd;
                    let rstd = (var + *eps).sqrt().recip();
                    let mut gmean = S::zero();
                    let mut gydot = S::zero();
                    for j in 0..d {
                        gmean += gs[j];
                        gydot += gs[j] * ys[j];
                    }
                    gmean /= nd;
                    gydot /= nd;
                    for j in 0..d {
                        gx[r * d + j] = rstd * (gs[j] - gmean - ys[j] * gydot);
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[x.0].value;
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_derivative(v))
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), data).unwrap());
            }
            Op::BceWithLogits(z, target) => {
                let vz = &self.nodes[z.0].value;
                let gscalar = g.item();
                let n = S::from_f64(target.len() as f64);
                let data = vz
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&zv, &t)| gscalar * (sigmoid(zv) - t) / n)
                    .collect();
                Self::accumulate(grads, *z, Tensor::new(vz.shape().to_vec(), data).unwrap());
            }
            Op::SoftDice(z, target, eps) => {
                let vz = &self.nodes[z.0].value;
                let gscalar = g.item();
                let mut inter = S::zero();
                let mut psum = S::zero();
                let mut tsum = S::zero();
                let ps: Vec<S> = vz.data().iter().map(|&zv| sigmoid(zv)).collect();
                for (&p, &t) in ps.iter().zip(target.iter()) {
                    inter += p * t;
                    psum += p;
                    tsum += t;
                }
                let num = S::from_f64(2.0) * inter + *eps;
                let den = psum + tsum + *eps;
                // d(1 - num/den)/dp_j = -(2 t_j den - num) / den^2
                let den2 = den * den;
                let data = ps
                    .iter()
                    .zip(target.iter())
                    .map(|(&p, &t)| {
                        let dldp = -(S::from_f64(2.0) * t * den - num) / den2;
                        gscalar * dldp * p * (S::one() - p)
                    })
                    .collect();
                Self::accumulate(grads, *z, Tensor::new(vz.shape().to_vec(), data).unwrap());
            }
            Op::MaxOf(inputs, argmax) => {
                Self::accumulate(grads, inputs[*argmax], g.clone());
            }
            Op::SumOf(inputs) => {
                for id in inputs {
                    Self::accumulate(grads, *id, g.clone());
                }
            }
            Op::ConcatRows(inputs) => {
                let cols = g.shape()[1];
                let mut offset = 0usize;
                for id in inputs {
                    let rows = self.nodes[id.0].value.shape()[0];
                    let block = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    Self::accumulate(grads, *id, Tensor::new(vec![rows, cols], block).unwrap());
                    offset += rows;
                }
            }
            Op::SliceRows(x, start, len) => {
                let vx = &self.nodes[x.0].value;
                let cols = vx.shape()[1];
                let mut gx = vec![S::zero(); vx.numel()];
                gx[start * cols..(start + len) * cols].copy_from_slice(g.data());
                Self::accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx).unwrap());
            }
        }
    }

    /// Whether a node was created by [`Tape::leaf`] (differentiable).
    pub fn requires_grad(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { requires_grad: true })
    }
}

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        (S::one() + (-z).exp()).recip()
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn gelu_value<S: Scalar>(x: S) -> S {
    // tanh approximation; smooth everywhere, which keeps finite-difference
    // checks clean.
    let c0 = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let c1 = S::from_f64(0.044715);
    let u = c0 * (x + c1 * x * x * x);
    S::from_f64(0.5) * x * (S::one() + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(0.797_884_560_802_865_4);
    let c1 = S::from_f64(0.044715);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (S::one() + S::from_f64(3.0) * c1 * x * x);
    S::from_f64(0.5) * (S::one() + t) + S::from_f64(0.5) * x * (S::one() - t * t) * du
}

fn matmul2<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn batch_matmul3<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bsb, kb, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(bs, bsb);
    assert_eq!(k, kb);
    let mut out = vec![S::zero(); bs * m * n];
    for t in 0..bs {
        let ad = &a.data()[t * m * k..(t + 1) * m * k];
        let bd = &b.data()[t * k * n..(t + 1) * k * n];
        let od = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == S::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut od[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Tensor::new(vec![bs, m, n], out).unwrap()
}

fn transpose_last<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    match shape.len() {
        2 => {
            let (m, n) = (shape[0], shape[1]);
            let mut out = vec![S::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out).unwrap()
        }
        3 => {
            let (b, m, n) = (shape[0], shape[1], shape[2]);
            let mut out = vec![S::zero(); b * m * n];
            for t in 0..b {
                for i in 0..m {
                    for j in 0..n {
                        out[t * m * n + j * m + i] = x.data()[t * m * n + i * n + j];
                    }
                }
            }
            Tensor::new(vec![b, n, m], out).unwrap()
        }
        _ => panic!("transpose_last expects 2-D or 3-D, got {:?}", shape),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Central-difference check of d(build(leaves))/d(leaf values).
    fn finite_diff_check(
        leaf_shapes: &[Vec<usize>],
        build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
        seed: u64,
    ) {
        let mut rng = crate::rng::rng_for(seed, "fdcheck", 0);
        let values: Vec<Tensor<f64>> = leaf_shapes
            .iter()
            .map(|s| Tensor::from_fn(s.clone(), |_| rng.random_range(-1.5..1.5)))
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root).unwrap();

        let h = 1e-5;
        for (li, base) in values.iter().enumerate() {
            let g = grads.get_or_zeros(ids[li], base.shape());
            for ci in 0..base.numel() {
                let eval = |delta: f64| {
                    let mut vs = values.clone();
                    vs[li].data_mut()[ci] += delta;
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = vs.iter().map(|v| t.leaf(v.clone())).collect();
                    let r = build(&mut t, &ids);
                    t.value(r).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data()[ci];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "leaf {li} coord {ci}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    /// Reduce any tensor node to a scalar through a fixed weighting so the
    /// check exercises non-uniform upstream gradients.
    fn spread_sum(tape: &mut Tape<f64>, x: NodeId) -> NodeId {
        let n = tape.value(x).numel();
        let w = Tensor::from_fn(vec![n, 1], |i| 0.3 + 0.1 * (i as f64 % 7.0));
        let wid = tape.constant(w);
        let flat = tape.reshape(x, vec![1, n]);
        let prod = tape.matmul(flat, wid);
        tape.reshape(prod, vec![1])
    }

    #[test]
    fn grad_add_scale_addrow_mulrow() {
        finite_diff_check(
            &[vec![3, 4], vec![3, 4], vec![4], vec![4]],
            |t, ids| {
                let s = t.add(ids[0], ids[1]);
                let s = t.add_row(s, ids[2]);
                let s = t.mul_row(s, ids[3]);
                let s = t.scale(s, 0.7);
                spread_sum(t, s)
            },
            1,
        );
    }

    #[test]
    fn grad_matmul_transpose() {
        finite_diff_check(
            &[vec![3, 4], vec![4, 2]],
            |t, ids| {
                let p = t.matmul(ids[0], ids[1]);
                let pt = t.transpose_last(p);
                spread_sum(t, pt)
            },
            2,
        );
    }

    #[test]
    fn grad_batch_matmul() {
        finite_diff_check(
            &[vec![2, 3, 4], vec![2, 4, 2]],
            |t, ids| {
                let p = t.batch_matmul(ids[0], ids[1]);
                spread_sum(t, p)
            },
            3,
        );
    }

    #[test]
    fn grad_softmax_layernorm_gelu() {
        finite_diff_check(
            &[vec![3, 5]],
            |t, ids| {
                let s = t.softmax(ids[0]);
                let l = t.layer_norm(s, 1e-6);
                let ge = t.gelu(l);
                spread_sum(t, ge)
            },
            4,
        );
    }

    #[test]
    fn grad_gather_sparse_slice_concat() {
        let index = Rc::new(vec![0u32, 2, 2, 5, 1, 3]);
        let map = Rc::new(SparseMap {
            entries: vec![(0, 0, 0.25), (0, 1, 0.75), (1, 2, 1.0), (2, 3, 0.5), (2, 0, 0.5)],
            in_len: 6,
            out_len: 3,
        });
        finite_diff_check(
            &[vec![2, 3], vec![2, 3]],
            move |t, ids| {
                let g = t.gather(ids[0], index.clone(), vec![6]);
                let g2 = t.reshape(g, vec![2, 3]);
                let c = t.concat_rows(vec![g2, ids[1]]);
                let s = t.slice_rows(c, 1, 2);
                let f = t.reshape(s, vec![6]);
                let sp = t.sparse_linear(f, map.clone(), vec![3]);
                spread_sum(t, sp)
            },
            5,
        );
    }

    #[test]
    fn grad_losses_and_max() {
        let target: Rc<Vec<f64>> = Rc::new(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let t2 = target.clone();
        finite_diff_check(
            &[vec![6], vec![6]],
            move |t, ids| {
                let bce = t.bce_with_logits(ids[0], target.clone());
                let dice = t.soft_dice(ids[0], target.clone(), 1.0);
                let total0 = t.sum_of(vec![bce, dice]);
                let bce1 = t.bce_with_logits(ids[1], t2.clone());
                let dice1 = t.soft_dice(ids[1], t2.clone(), 1.0);
                let total1 = t.sum_of(vec![bce1, dice1]);
                let (m, _) = t.max_of(vec![total0, total1]);
                m
            },
            6,
        );
    }

    #[test]
    fn max_of_ties_select_lowest_index_and_gate_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.5));
        let b = tape.leaf(Tensor::scalar(0.5));
        let (m, arg) = tape.max_of(vec![a, b]);
        assert_eq!(arg, 0);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 1.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn bce_matches_closed_form_at_zero_logits() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![4]));
        let bce = tape.bce_with_logits(z, Rc::new(vec![1.0, 0.0, 1.0, 0.0]));
        let v = tape.value(bce).item();
        assert!((v - (2.0f64).ln()).abs() < 1e-15);
    }
}
