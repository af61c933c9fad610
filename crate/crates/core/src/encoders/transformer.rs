use rand::Rng;

use super::TransformerConfig;
use crate::error::Result;
use crate::impl_module;
use crate::layers::{sinusoidal_positions, Init, LayerNorm, Linear, TransformerBlock};
use crate::tensor::{Real, Tape, Var};

/// Non-overlapping patches embedded to the hidden width, sinusoidal
/// positions, bidirectional pre-norm encoder layers and a final layernorm.
/// The series is zero-padded at the end to a whole number of patches.
#[derive(Debug, Clone)]
pub struct PatchTransformer<T> {
    pub embed: Linear<T>,
    pub layers: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
    patch_len: usize,
    tokens: usize,
}
impl_module!(PatchTransformer { embed, layers, norm });

impl<T: Real> PatchTransformer<T> {
    pub fn new(
        cfg: &TransformerConfig,
        series_length: usize,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embed = Linear::new(cfg.patch_len * channels, hidden, Init::KaimingUniform, rng);
        let layers = (0..cfg.layers)
            .map(|_| TransformerBlock::new(hidden, cfg.heads, 4 * hidden, false, Init::KaimingUniform, rng))
            .collect();
        PatchTransformer {
            embed,
            layers,
            norm: LayerNorm::new(hidden),
            patch_len: cfg.patch_len,
            tokens: series_length.div_ceil(cfg.patch_len),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (batch, len, channels) = (shape[0], shape[1], shape[2]);
        let padded_len = self.tokens * self.patch_len;
        let x = if padded_len > len {
            let pad = tape.constant(
                &[batch, padded_len - len, channels],
                vec![T::zero(); batch * (padded_len - len) * channels],
            )?;
            tape.concat(&[x, pad], 1)?
        } else {
            x
        };
        let patches = tape.reshape(x, &[batch, self.tokens, self.patch_len * channels])?;
        let mut h = self.embed.forward(tape, patches)?;
        let hidden = self.embed.outputs();
        let positions = sinusoidal_positions(self.tokens, hidden)
            .into_iter()
            .map(T::from_f64_lossy)
            .collect();
        let positions = tape.constant(&[self.tokens, hidden], positions)?;
        h = tape.add_suffix(h, positions)?;
        for layer in &self.layers {
            h = layer.forward(tape, h)?;
        }
        self.norm.forward(tape, h)
    }
}
