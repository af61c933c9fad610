//! Parameterized building blocks shared by the encoders and the backbone.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::impl_module;
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform,
    Normal(f64),
    Zeros,
}

impl Init {
    pub fn tensor<T: Real>(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(shape),
        }
        .trainable()
    }
}

/// Affine map over the last axis; `weight` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}
impl_module!(Linear { weight, bias });

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, init: Init, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init.tensor(&[inputs, outputs], inputs, rng),
            bias: Init::Zeros.tensor(&[outputs], inputs, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let inputs = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / inputs;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, inputs])?
        };
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(flat, w)?;
        let y = tape.add_suffix(y, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.outputs();
        tape.reshape(y, &out_shape)
    }
}

/// `[B, C_in, T] -> [B, C_out, T']`, stride 1.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    padding: Padding,
}
impl_module!(Conv1d { weight, bias });

impl<T: Real> Conv1d<T> {
    pub fn new(inputs: usize, outputs: usize, kernel: usize, padding: Padding, rng: &mut impl Rng) -> Self {
        let fan_in = inputs * kernel;
        Conv1d {
            weight: Init::KaimingUniform.tensor(&[outputs, inputs, kernel], fan_in, rng),
            bias: Init::Zeros.tensor(&[outputs], fan_in, rng),
            padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv1d(x, w, b, self.padding)
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}
impl_module!(BatchNorm1d {
    gamma,
    beta,
    running_mean,
    running_var
});

pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::full(&[channels], T::one()).trainable(),
            beta: Tensor::zeros(&[channels]).trainable(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        if !train {
            let running = (self.running_mean.data(), self.running_var.data());
            return Ok(tape.batchnorm(x, g, b, Some(running))?.0);
        }
        let (y, stats) = tape.batchnorm(x, g, b, None)?;
        let stats = stats.expect("training mode returns batch statistics");
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}
impl_module!(LayerNorm { gamma, beta });

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[width], T::one()).trainable(),
            beta: Tensor::zeros(&[width]).trainable(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layernorm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    heads: Heads,
}
impl_module!(MultiHeadAttention {
    query,
    key,
    value,
    output
});

#[derive(Debug, Clone, Copy)]
struct Heads {
    count: usize,
    causal: bool,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(width: usize, heads: usize, causal: bool, init: Init, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            query: Linear::new(width, width, init, rng),
            key: Linear::new(width, width, init, rng),
            value: Linear::new(width, width, init, rng),
            output: Linear::new(width, width, init, rng),
            heads: Heads { count: heads, causal },
        }
    }

    /// `[B, S, h] -> [B, S, h]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (batch, seq, width) = (shape[0], shape[1], shape[2]);
        let heads = self.heads.count;
        let dh = width / heads;
        let split = |tape: &mut Tape<T>, proj: &Linear<T>| -> Result<Var> {
            let y = proj.forward(tape, x)?;
            let y = tape.reshape(y, &[batch, seq, heads, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(tape, &self.query)?;
        let k = split(tape, &self.key)?;
        let v = split(tape, &self.value)?;
        let attended = tape.attention(q, k, v, self.heads.causal)?;
        let merged = tape.permute(attended, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, &[batch, seq, width])?;
        self.output.forward(tape, merged)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attention: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}
impl_module!(TransformerBlock {
    norm1,
    attention,
    norm2,
    ff_in,
    ff_out
});

impl<T: Real> TransformerBlock<T> {
    pub fn new(width: usize, heads: usize, ff_width: usize, causal: bool, init: Init, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            norm1: LayerNorm::new(width),
            attention: MultiHeadAttention::new(width, heads, causal, init, rng),
            norm2: LayerNorm::new(width),
            ff_in: Linear::new(width, ff_width, init, rng),
            ff_out: Linear::new(ff_width, width, init, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = self.attention.forward(tape, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.ff_in.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Fixed sinusoidal position table `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_handles_rank_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::<f64>::new(4, 3, Init::KaimingUniform, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 5, 4], vec![0.5; 40]).unwrap();
        let y = lin.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 3]);
        let names: Vec<String> = lin.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["weight", "bias"]);
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut bn = BatchNorm1d::<f64>::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&mut tape, x, true).unwrap();
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        let unbiased = 5.0 / 3.0;
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        let before = bn.running_mean.data()[0];
        bn.forward(&mut tape, x, false).unwrap();
        assert_eq!(bn.running_mean.data()[0], before);
        assert!(!bn.running_mean.requires_grad());
    }

    #[test]
    fn sinusoid_first_rows() {
        let p = sinusoidal_positions(2, 4);
        assert_eq!(&p[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((p[4] - 1f64.sin()).abs() < 1e-12);
        assert!((p[6] - (0.01f64).sin()).abs() < 1e-12);
    }
}
