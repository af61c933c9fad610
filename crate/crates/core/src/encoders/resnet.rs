use rand::Rng;

use super::cnn::ConvBlock;
use super::{to_channels_first, to_tokens, ConvConfig};
use crate::error::Result;
use crate::impl_module;
use crate::layers::{BatchNorm1d, Conv1d};
use crate::tensor::{Padding, Real, Tape, Var};

#[derive(Debug, Clone)]
pub struct Projection<T> {
    pub conv: Conv1d<T>,
    pub norm: BatchNorm1d<T>,
}
impl_module!(Projection { conv, norm });

/// Three convolutions (the configured kernel sizes) with a shortcut that is
/// the identity when widths agree and a normalized 1x1 convolution
/// otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub convs: Vec<ConvBlock<T>>,
    pub shortcut: Option<Projection<T>>,
}
impl_module!(ResidualBlock { convs, shortcut });

impl<T: Real> ResidualBlock<T> {
    fn new(inputs: usize, outputs: usize, kernels: &[usize], rng: &mut impl Rng) -> Self {
        let mut width = inputs;
        let convs = kernels
            .iter()
            .map(|&k| {
                let block = ConvBlock::new(width, outputs, k, rng);
                width = outputs;
                block
            })
            .collect();
        let shortcut = (inputs != outputs).then(|| Projection {
            conv: Conv1d::new(inputs, outputs, 1, Padding::Same, rng),
            norm: BatchNorm1d::new(outputs),
        });
        ResidualBlock { convs, shortcut }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter_mut().enumerate() {
            h = if i == last {
                conv.forward_linear(tape, h, train)?
            } else {
                conv.forward(tape, h, train)?
            };
        }
        let skip = match &mut self.shortcut {
            Some(p) => {
                let s = p.conv.forward(tape, x)?;
                p.norm.forward(tape, s, train)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }
}

/// Residual blocks, one per configured width, each using every configured
/// kernel size in turn. One token per time step.
#[derive(Debug, Clone)]
pub struct ResNet<T> {
    pub blocks: Vec<ResidualBlock<T>>,
    pub project: Conv1d<T>,
}
impl_module!(ResNet { blocks, project });

impl<T: Real> ResNet<T> {
    pub fn new(cfg: &ConvConfig, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut width = channels;
        let blocks = cfg
            .channels
            .iter()
            .map(|&c| {
                let block = ResidualBlock::new(width, c, &cfg.kernels, rng);
                width = c;
                block
            })
            .collect();
        ResNet {
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
