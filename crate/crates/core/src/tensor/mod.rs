//! Dense tensors, a reverse-mode gradient tape and the Adam optimizer.
//!
//! Parameters live in [`Tensor`] values owned by the model. Each training
//! step builds a fresh [`Tape`], binds the parameters into it with
//! [`Tape::param`], runs the forward pass, calls [`Tape::backward`] and
//! copies the gradients back with [`Tape::write_grads`].

mod adam;
pub mod checkpoint;
mod conv;
mod linalg;
mod module;
mod nn;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{Adam, AdamState};
pub use conv::Padding;
pub use module::{join_name, Module};
pub use nn::BatchStats;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Floating-point element type of a tensor.
///
/// `f32` is used for training runs and `f64` for gradient verification.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` on strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn bit_pattern(self) -> u64;
}

fn view_fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $bits:expr) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(view_fits(a.len(), m, k, rsa, csa), "gemm: lhs view out of bounds");
                assert!(view_fits(b.len(), k, n, rsb, csb), "gemm: rhs view out of bounds");
                assert!(
                    view_fits(c.len(), m, n, rsc, csc),
                    "gemm: output view out of bounds"
                );
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above and `c` is
                // uniquely borrowed, so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn bit_pattern(self) -> u64 {
                ($bits)(self)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, |v: f32| v.to_bits() as u64);
impl_real!(f64, matrixmultiply::dgemm, |v: f64| v.to_bits());

/// Process-unique identity of a tensor, used to bind parameters into a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TensorId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// An n-dimensional array of floating-point values.
///
/// `grad` is only ever populated for tensors with `requires_grad == true`.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; numel(shape)]).expect("positive dimensions")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value]).expect("scalar shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape, data).expect("positive dimensions")
    }

    /// Marks the tensor as a trainable parameter.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Switching `requires_grad` off also drops any gradient buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer. Ignored for non-trainable tensors.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::DataLength {
                shape: self.shape.clone(),
                len: g.len(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw bit patterns of shape and data.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for &d in &self.shape {
            h.write_u64(d as u64);
        }
        for v in &self.data {
            h.write_u64(v.bit_pattern());
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            id: TensorId::fresh(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// 64-bit FNV-1a. Stable across platforms and builds.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::DataLength { .. })
        ));
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn frozen_tensor_never_accumulates() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert!(t.grad().is_none());
        let mut p = Tensor::<f64>::zeros(&[3]).trainable();
        p.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        p.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.grad().unwrap(), &[2.0, 3.0, 4.0]);
        p.set_requires_grad(false);
        assert!(p.grad().is_none());
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::<f32>::new(&[2], vec![1.0, 2.000001]).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }
}
