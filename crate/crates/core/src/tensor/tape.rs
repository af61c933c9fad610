use std::collections::HashMap;

use super::{numel, Real, Tensor, TensorId};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `y` broadcast over the leading axes of `x`.
    AddSuffix(Var, Var),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad_left: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    /// Keeps the elementwise derivative computed in the forward pass.
    Gelu(Var, Vec<T>),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

pub(super) struct Node<T> {
    pub(super) shape: Vec<usize>,
    pub(super) value: Vec<T>,
    pub(super) op: Op<T>,
    pub(super) needs_grad: bool,
}

/// Record of the operations of one forward pass.
///
/// Nodes are appended in execution order, which is a topological order of
/// the computation graph; backward walks it in reverse.
pub struct Tape<T> {
    pub(super) nodes: Vec<Node<T>>,
    bound: HashMap<TensorId, Var>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(super) type Grads<T> = [Option<Vec<T>>];

/// Returns the gradient buffer of `v`, allocating it on first use, or
/// `None` when `v` does not lead to any trainable leaf.
pub(super) fn grad_of<'a, T: Real>(grads: &'a mut Grads<T>, nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(super) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(super) fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let (inner, inner_stride) = (out_shape[rank - 1], out_strides[rank - 1]);
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank - 1];
    let mut offset = 0usize;
    for _ in 0..src.len() / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&src[offset..offset + inner]);
        } else {
            out.extend((0..inner).map(|j| src[offset + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            offset += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a model tensor. Binding the same tensor twice yields the same
    /// variable, so shared parameters accumulate gradients from every use.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let v = self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad());
        self.bound.insert(t.id(), v);
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        check_len(shape, &value)?;
        Ok(self.push_leaf(shape.to_vec(), value, false))
    }

    /// A free leaf whose gradient is tracked (used for inputs under test).
    pub fn variable(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        check_len(shape, &value)?;
        Ok(self.push_leaf(shape.to_vec(), value, true))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("tape values are well-formed")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse pass from a scalar loss. Gradients from multiple paths are
    /// summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            backward_node(nodes, i, g, before);
        }
        Ok(())
    }

    /// Copies gradients of bound trainable tensors into their `grad` buffers.
    pub fn write_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        for p in params {
            if let Some(g) = self.bound.get(&p.id()).and_then(|&v| self.grad(v)) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), &[x])
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`'s shape.
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::ShapeMismatch {
                op: "add_suffix",
                lhs: xs.to_vec(),
                rhs: ys.to_vec(),
            });
        }
        let yv = self.value(y);
        let n = yv.len();
        let mut value = self.value(x).to_vec();
        for chunk in value.chunks_mut(n) {
            add_into(chunk, yv);
        }
        Ok(self.push(xs.to_vec(), value, Op::AddSuffix(x, y), &[x, y]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let value = permute_data(self.value(x), shape, axes);
        Ok(self.push(out_shape, value, Op::Permute(x, axes.to_vec()), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Picks one index along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] || shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "select",
                lhs: shape,
                rhs: vec![axis, index],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            value.extend_from_slice(&src[start..start + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, value, Op::Select { x, axis, index }, &[x]))
    }

    /// Mean over one axis, dropping that axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "mean_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let inv = T::one() / T::from_usize(len).unwrap();
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut value[o * inner..(o + 1) * inner];
            for l in 0..len {
                let start = (o * len + l) * inner;
                add_into(dst, &src[start..start + inner]);
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, value, Op::MeanAxis { x, axis }, &[x]))
    }
}

fn check_len<T>(shape: &[usize], value: &[T]) -> Result<()> {
    if shape.contains(&0) || numel(shape) != value.len() {
        return Err(Error::DataLength {
            shape: shape.to_vec(),
            len: value.len(),
        });
    }
    Ok(())
}

fn backward_node<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut Grads<T>) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = grad_of(grads, nodes, v) {
                    add_into(d, g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = grad_of(grads, nodes, *a) {
                add_into(d, g);
            }
            if let Some(d) = grad_of(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(d) = grad_of(grads, nodes, *a) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d = *d + g * y;
                }
            }
            if let Some(d) = grad_of(grads, nodes, *b) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + g * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *c);
            }
        }
        Op::AddSuffix(x, y) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                add_into(d, g);
            }
            if let Some(d) = grad_of(grads, nodes, *y) {
                let n = d.len();
                for chunk in g.chunks(n) {
                    add_into(d, chunk);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                d.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Reshape(x) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                add_into(d, g);
            }
        }
        Op::Permute(x, axes) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                add_into(d, &permute_data(g, &node.shape, &inverse));
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            let total = node.shape[*axis] * inner;
            for &v in xs {
                let chunk = nodes[v.0].shape[*axis] * inner;
                if let Some(d) = grad_of(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                    }
                }
                offset += chunk;
            }
        }
        Op::Select { x, axis, index } => {
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            if let Some(d) = grad_of(grads, nodes, *x) {
                for o in 0..outer {
                    let start = (o * len + index) * inner;
                    add_into(&mut d[start..start + inner], &g[o * inner..(o + 1) * inner]);
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            let inv = T::one() / T::from_usize(len).unwrap();
            if let Some(d) = grad_of(grads, nodes, *x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let start = (o * len + l) * inner;
                        for (d, &s) in d[start..start + inner].iter_mut().zip(src) {
                            *d = *d + s * inv;
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => super::linalg::matmul_backward(nodes, *a, *b, g, grads),
        Op::Bmm { a, b, trans_b } => super::linalg::bmm_backward(nodes, *a, *b, *trans_b, g, grads),
        Op::Conv1d { x, w, b, pad_left } => super::conv::conv1d_backward(nodes, node, *x, *w, *b, *pad_left, g, grads),
        Op::MaxPool1d { x, argmax } => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                let t = node.shape[2];
                for (o, (&gv, &src)) in g.iter().zip(argmax).enumerate() {
                    let row = o / t;
                    let idx = row * t + src;
                    d[idx] = d[idx] + gv;
                }
            }
        }
        Op::Relu(_)
        | Op::Gelu(..)
        | Op::Softmax(_)
        | Op::BatchNorm { .. }
        | Op::LayerNorm { .. }
        | Op::CrossEntropy { .. } => super::nn::backward(nodes, node, g, grads),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.variable(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], &[3.0]);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[3], &[1.0, -2.0, 5.0]);
        let s1 = tape.sum(a);
        let s2 = tape.sum(a);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let c = tape.constant(&[2], vec![3.0, 4.0]).unwrap();
        let p = tape.mul(a, c).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn binding_a_param_twice_reuses_it() {
        let w = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap().trainable();
        let mut frozen = Tensor::<f64>::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let f = tape.param(&frozen);
        let p = tape.mul(a, b).unwrap();
        let q = tape.mul(p, f).unwrap();
        let loss = tape.sum(q);
        tape.backward(loss).unwrap();
        let mut w = w;
        tape.write_grads([&mut w, &mut frozen]).unwrap();
        assert_eq!(w.grad().unwrap(), &[2.0, 4.0]);
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn permute_round_trip() {
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute_data(&src, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(p[0], 0.0);
        // output [4,2,3]: element (1,0,0) is input (0,0,1)
        assert_eq!(p[6], 1.0);
        let back = permute_data(&p, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, src);
    }

    #[test]
    fn select_and_concat_layout() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[1, 1, 2], &[5.0, 6.0]);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let last = tape.select(c, 1, 2).unwrap();
        assert_eq!(tape.value(last), &[5.0, 6.0]);
        let m = tape.mean_axis(c, 1).unwrap();
        assert_eq!(tape.value(m), &[3.0, 4.0]);
    }
}
