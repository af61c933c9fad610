use rand::Rng;

use super::resnet::Projection;
use super::{to_channels_first, to_tokens, InceptionConfig};
use crate::error::Result;
use crate::impl_module;
use crate::layers::{BatchNorm1d, Conv1d};
use crate::tensor::{Padding, Real, Tape, Var};

const POOL_WINDOW: usize = 3;

/// 1x1 bottleneck feeding parallel same-padded convolutions of kernel sizes
/// `K, 2K, ..., N*K`, next to a max-pool -> 1x1 branch on the block input.
/// Branch outputs are concatenated on channels, normalized and rectified.
#[derive(Debug, Clone)]
pub struct InceptionBlock<T> {
    pub bottleneck: Conv1d<T>,
    pub branches: Vec<Conv1d<T>>,
    pub pool_branch: Conv1d<T>,
    pub norm: BatchNorm1d<T>,
}
impl_module!(InceptionBlock {
    bottleneck,
    branches,
    pool_branch,
    norm
});

impl<T: Real> InceptionBlock<T> {
    fn new(inputs: usize, cfg: &InceptionConfig, rng: &mut impl Rng) -> Self {
        let bottleneck = Conv1d::new(inputs, cfg.bottleneck, 1, Padding::Same, rng);
        let branches = (1..=cfg.n_kernels)
            .map(|i| {
                Conv1d::new(
                    cfg.bottleneck,
                    cfg.branch_filters,
                    cfg.kernel_size * i,
                    Padding::Same,
                    rng,
                )
            })
            .collect();
        let pool_branch = Conv1d::new(inputs, cfg.branch_filters, 1, Padding::Same, rng);
        InceptionBlock {
            bottleneck,
            branches,
            pool_branch,
            norm: BatchNorm1d::new(Self::out_channels(cfg)),
        }
    }

    fn out_channels(cfg: &InceptionConfig) -> usize {
        (cfg.n_kernels + 1) * cfg.branch_filters
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.branches.iter().map(|c| c.kernel()).collect()
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let squeezed = self.bottleneck.forward(tape, x)?;
        let mut outputs = Vec::with_capacity(self.branches.len() + 1);
        for branch in &self.branches {
            outputs.push(branch.forward(tape, squeezed)?);
        }
        let pooled = tape.maxpool1d(x, POOL_WINDOW)?;
        outputs.push(self.pool_branch.forward(tape, pooled)?);
        let joined = tape.concat(&outputs, 1)?;
        let normed = self.norm.forward(tape, joined, train)?;
        Ok(tape.relu(normed))
    }
}

/// Stack of inception blocks with a projected residual connection around
/// every pair of blocks, then a 1x1 projection to the hidden width.
#[derive(Debug, Clone)]
pub struct Inception<T> {
    pub blocks: Vec<InceptionBlock<T>>,
    pub shortcuts: Vec<Projection<T>>,
    pub project: Conv1d<T>,
}
impl_module!(Inception {
    blocks,
    shortcuts,
    project
});

pub const RESIDUAL_EVERY: usize = 2;

impl<T: Real> Inception<T> {
    pub fn new(cfg: &InceptionConfig, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let width = InceptionBlock::<T>::out_channels(cfg);
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut shortcuts = Vec::new();
        let mut residual_width = channels;
        for i in 0..cfg.depth {
            let inputs = if i == 0 { channels } else { width };
            blocks.push(InceptionBlock::new(inputs, cfg, rng));
            if (i + 1) % RESIDUAL_EVERY == 0 {
                shortcuts.push(Projection {
                    conv: Conv1d::new(residual_width, width, 1, Padding::Same, rng),
                    norm: BatchNorm1d::new(width),
                });
                residual_width = width;
            }
        }
        Inception {
            blocks,
            shortcuts,
            project: Conv1d::new(width, hidden, 1, Padding::Same, rng),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let mut h = to_channels_first(tape, x)?;
        let mut residual = h;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(tape, h, train)?;
            if (i + 1) % RESIDUAL_EVERY == 0 {
                let p = &mut self.shortcuts[i / RESIDUAL_EVERY];
                let s = p.conv.forward(tape, residual)?;
                let s = p.norm.forward(tape, s, train)?;
                let sum = tape.add(h, s)?;
                h = tape.relu(sum);
                residual = h;
            }
        }
        let z = self.project.forward(tape, h)?;
        to_tokens(tape, z)
    }
}
