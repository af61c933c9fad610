//! Frozen decoder-only transformer, the latent-sequence assembly in front of
//! it, and the hybrid classifier that stacks a trainable encoder on top.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{Encoder, LinearHead};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::layers::{Init, LayerNorm, TransformerBlock};
use crate::tensor::{checkpoint, Module, Real, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_context: usize,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::with_hidden(128)
    }
}

impl BackboneConfig {
    pub fn with_hidden(hidden: usize) -> Self {
        BackboneConfig {
            layers: 4,
            hidden,
            heads: 4,
            ff_width: 4 * hidden,
            max_context: 256,
            prompt_len: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.ff_width == 0 || self.layers == 0 {
            return Err(Error::config(
                "backbone",
                "layers, hidden and ff_width must be positive",
            ));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "backbone_heads",
                format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if self.max_context < self.prompt_len + 2 {
            return Err(Error::config(
                "max_context",
                "no room for a latent token and the readout position",
            ));
        }
        Ok(())
    }
}

/// Causal pre-norm transformer with learned positions, fixed prompt rows
/// and a padding embedding. Every tensor is non-trainable: gradients pass
/// through it to the encoder, but nothing here is ever updated.
#[derive(Debug, Clone)]
pub struct FrozenBackbone<T> {
    pub positions: Tensor<T>,
    pub prompt: Tensor<T>,
    pub padding: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
    config: BackboneConfig,
}
impl_module!(FrozenBackbone {
    positions,
    prompt,
    padding,
    blocks,
    norm
});

pub fn build_backbone<T: Real>(cfg: &BackboneConfig) -> Result<FrozenBackbone<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Init::Normal(INIT_STD);
    let h = cfg.hidden;
    let positions = init.tensor(&[cfg.max_context, h], h, &mut rng);
    let prompt = init.tensor(&[cfg.prompt_len.max(1), h], h, &mut rng);
    let padding = init.tensor(&[h], h, &mut rng);
    let blocks = (0..cfg.layers)
        .map(|_| TransformerBlock::new(h, cfg.heads, cfg.ff_width, true, init, &mut rng))
        .collect();
    let mut bb = FrozenBackbone {
        positions,
        prompt,
        padding,
        blocks,
        norm: LayerNorm::new(h),
        config: cfg.clone(),
    };
    bb.freeze();
    Ok(bb)
}

/// Builds the architecture of `cfg` and fills it from a checkpoint written
/// by [`FrozenBackbone::export`] or any tool using the same format.
pub fn import_backbone<T: Real>(cfg: &BackboneConfig, path: &Path) -> Result<FrozenBackbone<T>> {
    let mut bb = build_backbone(cfg)?;
    checkpoint::load_into(&mut bb, path)?;
    Ok(bb)
}

impl<T: Real> FrozenBackbone<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn prompt_len(&self) -> usize {
        self.config.prompt_len
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    /// Assembled length for `latent` tokens: prompt, latent, readout.
    pub fn context_len(&self, latent: usize) -> Result<usize> {
        let s = self.config.prompt_len + latent + 1;
        if s > self.config.max_context {
            return Err(Error::ContextOverflow {
                prompt: self.config.prompt_len,
                latent,
                max: self.config.max_context,
            });
        }
        Ok(s)
    }

    /// `[B, L, h] -> [B, P + L + 1, h]`: prompt rows, the latent tokens,
    /// then one padding-embedding position used for the readout.
    pub fn assemble_input(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 3 || shape[2] != self.hidden() {
            return Err(Error::ShapeMismatch {
                op: "assemble_input",
                lhs: shape,
                rhs: vec![self.hidden()],
            });
        }
        let (batch, latent) = (shape[0], shape[1]);
        self.context_len(latent)?;
        let p = self.config.prompt_len;
        let mut parts = Vec::with_capacity(3);
        if p > 0 {
            let rows = &self.prompt.data()[..p * self.hidden()];
            parts.push(tape.constant(&[batch, p, self.hidden()], rows.repeat(batch))?);
        }
        parts.push(z);
        parts.push(tape.constant(&[batch, 1, self.hidden()], self.padding.data().repeat(batch))?);
        tape.concat(&parts, 1)
    }

    /// Final-layer hidden states `[B, S, h]` of an assembled sequence.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (s, h) = {
            let shape = tape.shape(x);
            (shape[1], shape[2])
        };
        let table = tape.constant(&[s, h], self.positions.data()[..s * h].to_vec())?;
        let mut x = tape.add_suffix(x, table)?;
        for block in &self.blocks {
            x = block.forward(tape, x)?;
        }
        self.norm.forward(tape, x)
    }

    /// Hidden state `[B, h]` at the readout position for latent tokens `z`.
    pub fn readout(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let assembled = self.assemble_input(tape, z)?;
        let hidden = self.forward(tape, assembled)?;
        let last = tape.shape(hidden)[1] - 1;
        tape.select(hidden, 1, last)
    }
}

/// Trainable encoder and head around a shared frozen backbone. As a
/// [`Module`] it exposes only the trainable parts.
#[derive(Debug, Clone)]
pub struct HybridModel<T> {
    pub encoder: Encoder<T>,
    pub backbone: Arc<FrozenBackbone<T>>,
    pub head: LinearHead<T>,
}
impl_module!(HybridModel { encoder, head });

impl<T: Real> HybridModel<T> {
    pub fn new(encoder: Encoder<T>, backbone: Arc<FrozenBackbone<T>>, classes: usize, head_seed: u64) -> Result<Self> {
        if encoder.hidden() != backbone.hidden() {
            return Err(Error::config(
                "hidden",
                format!(
                    "encoder width {} does not match backbone width {}",
                    encoder.hidden(),
                    backbone.hidden()
                ),
            ));
        }
        backbone.context_len(encoder.latent_len())?;
        let head = LinearHead::new(backbone.hidden(), classes, head_seed);
        Ok(HybridModel {
            encoder,
            backbone,
            head,
        })
    }

    /// `[B, T, d] -> [B, C]` logits.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let z = self.encoder.encode(tape, x, train)?;
        let features = self.backbone.readout(tape, z)?;
        self.head.classify(tape, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{build_encoder, EncoderConfig, Family};

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ff_width: 16,
            max_context: 32,
            prompt_len: 8,
            seed: 5,
        }
    }

    #[test]
    fn frozen_and_deterministic() {
        let a = build_backbone::<f64>(&tiny()).unwrap();
        let b = build_backbone::<f64>(&tiny()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.named_tensors().iter().all(|(_, t)| !t.requires_grad()));
        assert_eq!(a.num_trainable(), 0);
        let mut other = tiny();
        other.seed = 6;
        assert_ne!(build_backbone::<f64>(&other).unwrap().checksum(), a.checksum());
    }

    #[test]
    fn layout_of_assembled_sequence() {
        let bb = build_backbone::<f64>(&tiny()).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(&[2, 16, 8], vec![7.0; 256]).unwrap();
        let zhat = bb.assemble_input(&mut tape, z).unwrap();
        assert_eq!(tape.shape(zhat), &[2, 25, 8]);
        let v = tape.value(zhat);
        let row = |b: usize, s: usize| &v[(b * 25 + s) * 8..(b * 25 + s + 1) * 8];
        assert_eq!(row(1, 0), &bb.prompt.data()[..8]);
        assert_eq!(row(1, 7), &bb.prompt.data()[56..64]);
        assert!((8..24).all(|s| row(0, s) == [7.0; 8]));
        assert_eq!(row(0, 24), bb.padding.data());
    }

    #[test]
    fn perturbing_latent_changes_only_its_positions() {
        let bb = build_backbone::<f64>(&tiny()).unwrap();
        let mut tape = Tape::new();
        let z1 = tape.constant(&[1, 16, 8], vec![0.0; 128]).unwrap();
        let mut data = vec![0.0; 128];
        data[3 * 8 + 2] = 1.0;
        let z2 = tape.constant(&[1, 16, 8], data).unwrap();
        let a = bb.assemble_input(&mut tape, z1).unwrap();
        let b = bb.assemble_input(&mut tape, z2).unwrap();
        let differing: Vec<usize> = (0..25)
            .filter(|s| tape.value(a)[s * 8..(s + 1) * 8] != tape.value(b)[s * 8..(s + 1) * 8])
            .collect();
        assert_eq!(differing, vec![11]);
    }

    #[test]
    fn overflow_names_all_sizes() {
        let bb = build_backbone::<f64>(&tiny()).unwrap();
        let mut tape = Tape::new();
        assert!(bb.context_len(23).is_ok());
        let z = tape.constant(&[1, 24, 8], vec![0.0; 192]).unwrap();
        let err = bb.assemble_input(&mut tape, z).unwrap_err();
        assert!(matches!(
            err,
            Error::ContextOverflow {
                prompt: 8,
                latent: 24,
                max: 32
            }
        ));
    }

    #[test]
    fn forward_is_stable_and_causal() {
        let bb = build_backbone::<f64>(&tiny()).unwrap();
        let data: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(&[1, 5, 8], data).unwrap();
            let y = bb.forward(&mut tape, x).unwrap();
            tape.value(y).to_vec()
        };
        let first = run(data.clone());
        assert_eq!(first, run(data.clone()));
        let mut later = data;
        later[39] += 1.0;
        let changed = run(later);
        assert_eq!(&first[..32], &changed[..32]);
        assert_ne!(&first[32..], &changed[32..]);
    }

    #[test]
    fn hybrid_trains_encoder_only() {
        let bb = Arc::new(build_backbone::<f64>(&tiny()).unwrap());
        let mut ecfg = EncoderConfig::new(Family::Transformer, 8);
        ecfg.transformer.heads = 2;
        ecfg.transformer.layers = 1;
        let enc = build_encoder(&ecfg, 16, 1, 3).unwrap();
        let mut model = HybridModel::new(enc, bb.clone(), 3, 4).unwrap();
        let before = bb.checksum();
        let mut tape = Tape::new();
        let x = tape
            .constant(&[2, 16, 1], (0..32).map(|i| (i as f64 * 0.3).cos()).collect())
            .unwrap();
        let logits = model.forward(&mut tape, x, true).unwrap();
        assert_eq!(tape.shape(logits), &[2, 3]);
        let loss = tape.cross_entropy(logits, &[0, 2]).unwrap();
        tape.backward(loss).unwrap();
        tape.write_grads(model.tensors_mut()).unwrap();
        let enc_grad = model
            .encoder
            .named_tensors()
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(enc_grad > 0.0);
        assert!(bb.named_tensors().iter().all(|(_, t)| t.grad().is_none()));
        assert_eq!(bb.checksum(), before);
        assert!(model
            .named_tensors()
            .iter()
            .all(|(n, _)| n.starts_with("encoder") || n.starts_with("head")));
    }

    #[test]
    fn width_mismatch_rejected() {
        let bb = Arc::new(build_backbone::<f64>(&tiny()).unwrap());
        let enc = build_encoder(&EncoderConfig::new(Family::Mlp, 16), 16, 1, 3).unwrap();
        assert!(HybridModel::new(enc, bb, 2, 0).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        let bb = build_backbone::<f32>(&tiny()).unwrap();
        bb.export(&path).unwrap();
        let mut cfg = tiny();
        cfg.seed = 99;
        let back = import_backbone::<f32>(&cfg, &path).unwrap();
        assert_eq!(back.checksum(), bb.checksum());
        assert_eq!(back.num_trainable(), 0);
    }
}
