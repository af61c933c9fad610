use rand::Rng;

use super::{to_channels_first, to_tokens, ConvConfig};
use crate::error::Result;
use crate::impl_module;
use crate::layers::{BatchNorm1d, Conv1d};
use crate::tensor::{Padding, Real, Tape, Var};

/// Same-padded convolution, batchnorm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv1d<T>,
    pub norm: BatchNorm1d<T>,
}
impl_module!(ConvBlock { conv, norm });

impl<T: Real> ConvBlock<T> {
    pub fn new(inputs: usize, outputs: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv1d::new(inputs, outputs, kernel, Padding::Same, rng),
            norm: BatchNorm1d::new(outputs),
        }
    }

    /// Convolution and normalization without the activation.
    pub fn forward_linear(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        self.norm.forward(tape, y, train)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let y = self.forward_linear(tape, x, train)?;
        Ok(tape.relu(y))
    }
}

/// Fully convolutional network: conv blocks, then a 1x1 projection to the
/// hidden width. One token per time step.
#[derive(Debug, Clone)]
pub struct Fcn<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub project: Conv1d<T>,
}
impl_module!(Fcn { blocks, project });

impl<T: Real> Fcn<T> {
    pub fn new(cfg: &ConvConfig, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut width = channels;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        for (&c, &k) in cfg.channels.iter().zip(&cfg.kernels) {
            blocks.push(ConvBlock::new(width, c, k, rng));
            width = c;
        }
        Fcn {
            blocks,
            project: Conv1d::new(width, hidden, 1, Padding::Same, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let mut h = to_channels_first(tape, x)?;
        for block in &mut self.blocks {
            h = block.forward(tape, h, train)?;
        }
        let z = self.project.forward(tape, h)?;
        to_tokens(tape, z)
    }
}
