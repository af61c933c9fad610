use super::tape::{grad_of, Grads, Node, Op};
use super::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Zero padding applied by [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output length `T - K + 1`.
    Valid,
    /// Output length `T`. For even kernels the extra zero goes on the right.
    Same,
}

impl Padding {
    pub fn split(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let left = (kernel - 1) / 2;
                (left, kernel - 1 - left)
            }
        }
    }
}

/// Output positions `t` of kernel tap `k` that read inside the unpadded
/// input, i.e. `0 <= t + k - pad_left < len`. Empty ranges have `lo == hi`.
fn tap_range(k: usize, pad_left: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad_left.saturating_sub(k).min(out_len);
    let hi = (len + pad_left).saturating_sub(k).min(out_len).max(lo);
    (lo, hi)
}

/// Lays out the receptive fields of one sample as a `[C*K, T_out]` matrix.
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    pad_left: usize,
    out_len: usize,
    col: &mut [T],
) {
    for c in 0..channels {
        let src = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &mut col[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            let (lo, hi) = tap_range(k, pad_left, len, out_len);
            row.fill(T::zero());
            if hi > lo {
                row[lo..hi].copy_from_slice(&src[lo + k - pad_left..hi + k - pad_left]);
            }
        }
    }
}

fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    len: usize,
    kernel: usize,
    pad_left: usize,
    out_len: usize,
    dx: &mut [T],
) {
    for c in 0..channels {
        let dst = &mut dx[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &col[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            let (lo, hi) = tap_range(k, pad_left, len, out_len);
            if hi == lo {
                continue;
            }
            for (d, &v) in dst[lo + k - pad_left..hi + k - pad_left].iter_mut().zip(&row[lo..hi]) {
                *d = *d + v;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Stride-1 cross-correlation of `x: [B, C_in, T]` with
    /// `w: [C_out, C_in, K]` plus `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, kernel) = (sw[0], sw[2]);
        let (pl, pr) = padding.split(kernel);
        let padded = len + pl + pr;
        if kernel > padded {
            return Err(Error::KernelTooLong { kernel, padded });
        }
        let out_len = padded - kernel + 1;
        let ck = c_in * kernel;
        let direct = kernel == 1 && pl == 0;
        let mut col = if direct {
            Vec::new()
        } else {
            vec![T::zero(); ck * out_len]
        };
        let mut out = vec![T::zero(); batch * c_out * out_len];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        for bi in 0..batch {
            let xs = &xv[bi * c_in * len..(bi + 1) * c_in * len];
            let rhs: &[T] = if direct {
                xs
            } else {
                im2col(xs, c_in, len, kernel, pl, out_len, &mut col);
                &col
            };
            let dst = &mut out[bi * c_out * out_len..(bi + 1) * c_out * out_len];
            for (co, row) in dst.chunks_mut(out_len).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            T::gemm(
                c_out,
                ck,
                out_len,
                T::one(),
                wv,
                ck,
                1,
                rhs,
                out_len,
                1,
                T::one(),
                dst,
                out_len,
                1,
            );
        }
        let op = Op::Conv1d { x, w, b, pad_left: pl };
        Ok(self.push(vec![batch, c_out, out_len], out, op, &[x, w, b]))
    }

    /// Stride-1 max pooling over the last axis of `[B, C, T]`, padded so the
    /// output keeps length `T`. Ties resolve to the earliest index.
    pub fn maxpool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || window == 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool1d",
                lhs: shape,
                rhs: vec![window],
            });
        }
        let len = shape[2];
        let (pl, _) = Padding::Same.split(window);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut argmax = Vec::with_capacity(xv.len());
        for row in xv.chunks(len) {
            for t in 0..len {
                let lo = t.saturating_sub(pl);
                let hi = (t + window - pl).min(len);
                let mut best = lo;
                for j in lo + 1..hi {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(best);
            }
        }
        Ok(self.push(shape, out, Op::MaxPool1d { x, argmax }, &[x]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv1d_backward<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    x: Var,
    w: Var,
    b: Var,
    pad_left: usize,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let sx = &nodes[x.0].shape;
    let (batch, c_in, len) = (sx[0], sx[1], sx[2]);
    let (c_out, kernel) = (nodes[w.0].shape[0], nodes[w.0].shape[2]);
    let out_len = node.shape[2];
    let ck = c_in * kernel;
    let xv = &nodes[x.0].value;
    let wv = &nodes[w.0].value;
    let direct = kernel == 1 && pad_left == 0;

    if let Some(db) = grad_of(grads, nodes, b) {
        for gb in g.chunks(c_out * out_len) {
            for (d, row) in db.iter_mut().zip(gb.chunks(out_len)) {
                *d = *d + row.iter().copied().sum();
            }
        }
    }
    if nodes[w.0].needs_grad {
        let mut col = if direct {
            Vec::new()
        } else {
            vec![T::zero(); ck * out_len]
        };
        let dw = grad_of(grads, nodes, w).expect("weight needs grad");
        for bi in 0..batch {
            let xs = &xv[bi * c_in * len..(bi + 1) * c_in * len];
            let rhs: &[T] = if direct {
                xs
            } else {
                im2col(xs, c_in, len, kernel, pad_left, out_len, &mut col);
                &col
            };
            let gb = &g[bi * c_out * out_len..(bi + 1) * c_out * out_len];
            // dW [C_out, C_in*K] += G_b * col^T
            T::gemm(
                c_out,
                out_len,
                ck,
                T::one(),
                gb,
                out_len,
                1,
                rhs,
                1,
                out_len,
                T::one(),
                dw,
                ck,
                1,
            );
        }
    }
    if nodes[x.0].needs_grad {
        let mut dcol = vec![T::zero(); ck * out_len];
        let dx = grad_of(grads, nodes, x).expect("input needs grad");
        for bi in 0..batch {
            let gb = &g[bi * c_out * out_len..(bi + 1) * c_out * out_len];
            let dxs = &mut dx[bi * c_in * len..(bi + 1) * c_in * len];
            if direct {
                T::gemm(
                    ck,
                    c_out,
                    out_len,
                    T::one(),
                    wv,
                    1,
                    ck,
                    gb,
                    out_len,
                    1,
                    T::one(),
                    dxs,
                    out_len,
                    1,
                );
            } else {
                // dcol [C_in*K, T_out] = W^T * G_b
                T::gemm(
                    ck,
                    c_out,
                    out_len,
                    T::one(),
                    wv,
                    1,
                    ck,
                    gb,
                    out_len,
                    1,
                    T::zero(),
                    &mut dcol,
                    out_len,
                    1,
                );
                col2im(&dcol, c_in, len, kernel, pad_left, out_len, dxs);
            }
        }
    }
}
