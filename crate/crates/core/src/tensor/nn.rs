use super::tape::{grad_of, Grads, Node, Op};
use super::{Real, Tape, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics of the batch seen by a training-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the form folded into running averages.
    pub var: Vec<T>,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    // tanh through exp, which is much cheaper than the libm tanh
    let th = T::one() - (T::one() + T::one()) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x);
    (y, dy)
}

/// Population mean and variance of `n` values.
fn normalize<T: Real>(values: impl Iterator<Item = T> + Clone, n: usize) -> (T, T) {
    let nf = T::from_usize(n).unwrap();
    let mean = values.clone().fold(T::zero(), |a, v| a + v) / nf;
    let var = values.fold(T::zero(), |a, v| a + (v - mean) * (v - mean)) / nf;
    (mean, var)
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), value, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (value, deriv) = self.value(x).iter().map(|&v| gelu_parts(v)).unzip();
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x, deriv), &[x])
    }

    /// Softmax over the last axis. With `causal`, the last two axes must be
    /// square and entries above the diagonal are masked to zero probability.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != n) {
            return Err(Error::ShapeMismatch {
                op: "causal softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let visible = if causal { r % n + 1 } else { n };
            let m = row[..visible].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut total = T::zero();
            for v in &mut row[..visible] {
                *v = (*v - m).exp();
                total = total + *v;
            }
            for v in &mut row[..visible] {
                *v = *v / total;
            }
            row[visible..].iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    /// Batch normalization over axis 1 of `[B, C]` or `[B, C, T]`.
    ///
    /// In training mode statistics come from the batch and are returned so
    /// the caller can update its running averages; otherwise `running`
    /// `(mean, var)` is used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 3) || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]]
        {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (batch, channels) = (shape[0], shape[1]);
        let len = shape.get(2).copied().unwrap_or(1);
        let xv = self.value(x);
        let eps = T::from_f64_lossy(NORM_EPS);
        let index = |b: usize, c: usize, t: usize| (b * channels + c) * len + t;
        let mut stats = BatchStats {
            mean: vec![T::zero(); channels],
            var: vec![T::zero(); channels],
        };
        let mut inv_std = vec![T::zero(); channels];
        let n = batch * len;
        for c in 0..channels {
            let (mean, var) = match running {
                Some((rm, rv)) => (rm[c], rv[c]),
                None => {
                    let values = (0..batch).flat_map(|b| (0..len).map(move |t| (b, t)));
                    let (mean, var) = normalize(values.map(|(b, t)| xv[index(b, c, t)]), n);
                    stats.mean[c] = mean;
                    stats.var[c] = if n > 1 {
                        var * T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
                    } else {
                        var
                    };
                    (mean, var)
                }
            };
            stats.mean[c] = mean;
            inv_std[c] = T::one() / (var + eps).sqrt();
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (&v, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / len) % channels;
            *h = (v - stats.mean[c]) * inv_std[c];
            *o = gv[c] * *h + bv[c];
        }
        let training = running.is_none();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        };
        let y = self.push(shape, out, op, &[x, gamma, beta]);
        Ok((y, training.then_some(stats)))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / n);
        for (r, row) in xv.chunks(n).enumerate() {
            let (mean, var) = normalize(row.iter().copied(), n);
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = gv[j] * h + bv[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// Mean cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let classes = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let total: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + total.ln();
            loss = loss + lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = loss / T::from_usize(labels.len()).unwrap();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }
}

/// Input gradient of a normalization over one group, given the gradient
/// with respect to the normalized values.
fn norm_input_grad<'a, T: Real>(dxhat: &'a [T], xhat: &'a [T], inv_std: T) -> impl Iterator<Item = T> + 'a {
    let n = T::from_usize(dxhat.len()).unwrap();
    let s1: T = dxhat.iter().copied().sum();
    let s2: T = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum();
    dxhat
        .iter()
        .zip(xhat)
        .map(move |(&d, &h)| inv_std / n * (n * d - s1 - h * s2))
}

pub(super) fn backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut Grads<T>) {
    match &node.op {
        Op::Relu(x) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                for ((d, &g), &v) in d.iter_mut().zip(g).zip(&nodes[x.0].value) {
                    if v > T::zero() {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::Gelu(x, deriv) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                for ((d, &g), &dy) in d.iter_mut().zip(g).zip(deriv) {
                    *d = *d + g * dy;
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(d) = grad_of(grads, nodes, *x) {
                let n = *node.shape.last().unwrap();
                for ((d, g), y) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + y * (g - dot);
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let shape = &node.shape;
            let (batch, channels) = (shape[0], shape[1]);
            let len = shape.get(2).copied().unwrap_or(1);
            let channel_of = |i: usize| (i / len) % channels;
            if let Some(db) = grad_of(grads, nodes, *beta) {
                for (i, &gv) in g.iter().enumerate() {
                    db[channel_of(i)] = db[channel_of(i)] + gv;
                }
            }
            if let Some(dg) = grad_of(grads, nodes, *gamma) {
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    dg[channel_of(i)] = dg[channel_of(i)] + gv * h;
                }
            }
            let gamma_v = &nodes[gamma.0].value;
            if let Some(dx) = grad_of(grads, nodes, *x) {
                if *training {
                    let mut dxhat = Vec::with_capacity(batch * len);
                    let mut hs = Vec::with_capacity(batch * len);
                    for c in 0..channels {
                        dxhat.clear();
                        hs.clear();
                        for b in 0..batch {
                            let start = (b * channels + c) * len;
                            dxhat.extend(g[start..start + len].iter().map(|&v| v * gamma_v[c]));
                            hs.extend_from_slice(&xhat[start..start + len]);
                        }
                        let grads_c: Vec<T> = norm_input_grad(&dxhat, &hs, inv_std[c]).collect();
                        for b in 0..batch {
                            let start = (b * channels + c) * len;
                            for (d, &v) in dx[start..start + len].iter_mut().zip(&grads_c[b * len..(b + 1) * len]) {
                                *d = *d + v;
                            }
                        }
                    }
                } else {
                    for (i, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        let c = channel_of(i);
                        *d = *d + gv * gamma_v[c] * inv_std[c];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = *node.shape.last().unwrap();
            if let Some(db) = grad_of(grads, nodes, *beta) {
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                }
            }
            if let Some(dg) = grad_of(grads, nodes, *gamma) {
                for (row, h) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((d, &v), &h) in dg.iter_mut().zip(row).zip(h) {
                        *d = *d + v * h;
                    }
                }
            }
            let gamma_v = &nodes[gamma.0].value;
            if let Some(dx) = grad_of(grads, nodes, *x) {
                let mut dxhat = vec![T::zero(); n];
                for (r, ((d, row), h)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                    for ((dh, &v), &gm) in dxhat.iter_mut().zip(row).zip(gamma_v) {
                        *dh = v * gm;
                    }
                    for (d, v) in d.iter_mut().zip(norm_input_grad(&dxhat, h, inv_std[r])) {
                        *d = *d + v;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if let Some(d) = grad_of(grads, nodes, *logits) {
                let classes = nodes[logits.0].shape[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                for ((d, p), &label) in d.chunks_mut(classes).zip(probs.chunks(classes)).zip(labels) {
                    for (j, (d, &p)) in d.iter_mut().zip(p).enumerate() {
                        let target = if j == label { T::one() } else { T::zero() };
                        *d = *d + scale * (p - target);
                    }
                }
            }
        }
        _ => unreachable!("not an nn op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn layernorm_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[1, 4], vec![3.5; 4]).unwrap();
        let g = tape.constant(&[4], vec![1.0; 4]).unwrap();
        let b = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 4], vec![0.3; 8]).unwrap();
        let loss = tape.cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(loss)[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_tiny_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[1, 2], vec![10.0, -10.0]).unwrap();
        let loss = tape.cross_entropy(x, &[0]).unwrap();
        let v = tape.value(loss)[0];
        assert!((v - 2.061e-9).abs() < 1e-11, "{v}");
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.cross_entropy(x, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 2], vec![1.0, 5.0, 1.0, 1.0]).unwrap();
        let y = tape.softmax(x, true).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn batchnorm_train_vs_eval() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = tape.constant(&[1], vec![1.0]).unwrap();
        let b = tape.constant(&[1], vec![0.0]).unwrap();
        let (y, stats) = tape.batchnorm(x, g, b, None).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
        let mean: f64 = tape.value(y).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        let (y2, none) = tape.batchnorm(x, g, b, Some((&[0.0], &[1.0]))).unwrap();
        assert!(none.is_none());
        for (a, b) in tape.value(y2).iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }
}
