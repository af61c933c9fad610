use super::tape::{grad_of, Grads, Node, Op};
use super::{Real, Tape, Var};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k,
            1,
            self.value(b),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[G, M, K] x [G, K, N] -> [G, M, N]`; with `trans_b`
    /// the right operand is laid out as `[G, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || Error::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch());
        }
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); groups * m * n];
        for gi in 0..groups {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[gi * m * k..(gi + 1) * m * k],
                k,
                1,
                &bv[gi * k * n..(gi + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[gi * m * n..(gi + 1) * m * n],
                n,
                1,
            );
        }
        Ok(self.push(vec![groups, m, n], out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Scaled dot-product attention on `[B, H, S, d_h]` operands:
    /// `softmax(q k^T / sqrt(d_h) + mask) v`. The causal mask hides
    /// strictly later positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 4 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (b, h, s, dh) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = [b * h, s, dh];
        let q = self.reshape(q, &flat)?;
        let k = self.reshape(k, &flat)?;
        let v = self.reshape(v, &flat)?;
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt());
        let weights = self.softmax(scores, causal)?;
        let out = self.bmm(weights, v, false)?;
        self.reshape(out, &shape)
    }
}

pub(super) fn matmul_backward<T: Real>(nodes: &[Node<T>], a: Var, b: Var, g: &[T], grads: &mut Grads<T>) {
    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
    let n = nodes[b.0].shape[1];
    let bv = &nodes[b.0].value;
    let av = &nodes[a.0].value;
    if let Some(da) = grad_of(grads, nodes, a) {
        // dA += G * B^T
        T::gemm(m, n, k, T::one(), g, n, 1, bv, 1, n, T::one(), da, k, 1);
    }
    if let Some(db) = grad_of(grads, nodes, b) {
        // dB += A^T * G
        T::gemm(k, m, n, T::one(), av, 1, k, g, n, 1, T::one(), db, n, 1);
    }
}

pub(super) fn bmm_backward<T: Real>(nodes: &[Node<T>], a: Var, b: Var, trans_b: bool, g: &[T], grads: &mut Grads<T>) {
    let sa = &nodes[a.0].shape;
    let (groups, m, k) = (sa[0], sa[1], sa[2]);
    let n = if trans_b {
        nodes[b.0].shape[1]
    } else {
        nodes[b.0].shape[2]
    };
    let av = &nodes[a.0].value;
    let bv = &nodes[b.0].value;
    let (mk, kn, mn) = (m * k, k * n, m * n);
    if let Some(da) = grad_of(grads, nodes, a) {
        // dA = G * op(B)^T; op(B)^T is [N, K]
        let (rs, cs) = if trans_b { (k, 1) } else { (1, n) };
        for gi in 0..groups {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &g[gi * mn..(gi + 1) * mn],
                n,
                1,
                &bv[gi * kn..(gi + 1) * kn],
                rs,
                cs,
                T::one(),
                &mut da[gi * mk..(gi + 1) * mk],
                k,
                1,
            );
        }
    }
    if let Some(db) = grad_of(grads, nodes, b) {
        for gi in 0..groups {
            let gs = &g[gi * mn..(gi + 1) * mn];
            let as_ = &av[gi * mk..(gi + 1) * mk];
            let dst = &mut db[gi * kn..(gi + 1) * kn];
            if trans_b {
                // dB [N, K] += G^T * A
                T::gemm(n, m, k, T::one(), gs, 1, n, as_, k, 1, T::one(), dst, k, 1);
            } else {
                // dB [K, N] += A^T * G
                T::gemm(k, m, n, T::one(), as_, 1, k, gs, n, 1, T::one(), dst, n, 1);
            }
        }
    }
}
