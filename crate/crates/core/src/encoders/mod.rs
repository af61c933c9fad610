//! Time series encoders mapping `[B, T, d]` batches to `[B, L, h]` latent
//! token sequences, and the linear head used without a backbone.

mod cnn;
mod inception;
mod mlp;
mod resnet;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cnn::Fcn;
pub use inception::{Inception, InceptionBlock};
pub use mlp::Mlp;
pub use resnet::ResNet;
pub use transformer::PatchTransformer;

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::tensor::{Module, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Mlp,
    Cnn,
    ResNet,
    Inception,
    Transformer,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Mlp,
        Family::Cnn,
        Family::ResNet,
        Family::Inception,
        Family::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Cnn => "cnn",
            Family::ResNet => "resnet",
            Family::Inception => "inception",
            Family::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config("encoder", format!("unknown family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
}

/// Shared by the CNN (FCN layout) and ResNet families.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InceptionConfig {
    /// Parallel convolution branches per block; branch `i` (1-based) uses
    /// kernel size `kernel_size * i`.
    pub n_kernels: usize,
    pub kernel_size: usize,
    pub depth: usize,
    pub bottleneck: usize,
    /// Output channels of each branch, including the pooling branch.
    pub branch_filters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub patch_len: usize,
}

/// Encoder hyperparameters. Only the sub-config of `family` is used.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub family: Family,
    pub hidden: usize,
    pub mlp: MlpConfig,
    pub conv: ConvConfig,
    pub inception: InceptionConfig,
    pub transformer: TransformerConfig,
}

impl EncoderConfig {
    pub fn new(family: Family, hidden: usize) -> Self {
        EncoderConfig {
            family,
            hidden,
            mlp: MlpConfig { widths: vec![500, 500] },
            conv: ConvConfig {
                channels: vec![128, 256, 128],
                kernels: vec![8, 5, 3],
            },
            inception: InceptionConfig {
                n_kernels: 3,
                kernel_size: 8,
                depth: 6,
                bottleneck: 32,
                branch_filters: 32,
            },
            transformer: TransformerConfig {
                layers: 2,
                heads: 4,
                patch_len: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be positive"));
        }
        match self.family {
            Family::Mlp => {
                if self.mlp.widths.contains(&0) {
                    return Err(Error::config("mlp_widths", "widths must be positive"));
                }
            }
            Family::Cnn | Family::ResNet => {
                let c = &self.conv;
                if c.channels.is_empty() || c.channels.len() != c.kernels.len() {
                    return Err(Error::config(
                        "conv_channels",
                        "needs one kernel size per channel width and at least one layer",
                    ));
                }
                if c.channels.iter().chain(&c.kernels).any(|&v| v == 0) {
                    return Err(Error::config("conv_channels", "widths and kernels must be positive"));
                }
            }
            Family::Inception => {
                let c = &self.inception;
                if !(1..=8).contains(&c.n_kernels) {
                    return Err(Error::config("n_kernels", "must be in 1..=8"));
                }
                if c.kernel_size < 2 {
                    return Err(Error::config("kernel_size", "must be at least 2"));
                }
                if c.depth == 0 || c.bottleneck == 0 || c.branch_filters == 0 {
                    return Err(Error::config(
                        "depth",
                        "depth, bottleneck and branch_filters must be positive",
                    ));
                }
            }
            Family::Transformer => {
                let c = &self.transformer;
                if c.heads == 0 || !self.hidden.is_multiple_of(c.heads) {
                    return Err(Error::config(
                        "heads",
                        format!("hidden width {} is not divisible by {} heads", self.hidden, c.heads),
                    ));
                }
                if c.layers == 0 || c.patch_len == 0 {
                    return Err(Error::config("patch_len", "layers and patch_len must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Number of latent tokens for a series of the given length.
    pub fn latent_len(&self, series_length: usize) -> usize {
        match self.family {
            Family::Mlp => 1,
            Family::Cnn | Family::ResNet | Family::Inception => series_length,
            Family::Transformer => series_length.div_ceil(self.transformer.patch_len),
        }
    }
}

#[derive(Debug, Clone)]
enum Network<T> {
    Mlp(Mlp<T>),
    Cnn(Fcn<T>),
    ResNet(ResNet<T>),
    Inception(Inception<T>),
    Transformer(PatchTransformer<T>),
}

impl<T: Real> Module<T> for Network<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            Network::Mlp(n) => n.collect(prefix, out),
            Network::Cnn(n) => n.collect(prefix, out),
            Network::ResNet(n) => n.collect(prefix, out),
            Network::Inception(n) => n.collect(prefix, out),
            Network::Transformer(n) => n.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        match self {
            Network::Mlp(n) => n.collect_mut(prefix, out),
            Network::Cnn(n) => n.collect_mut(prefix, out),
            Network::ResNet(n) => n.collect_mut(prefix, out),
            Network::Inception(n) => n.collect_mut(prefix, out),
            Network::Transformer(n) => n.collect_mut(prefix, out),
        }
    }
}

/// A trainable encoder built for a fixed series length and channel count.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    series_length: usize,
    channels: usize,
    net: Network<T>,
}

impl<T: Real> Module<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.net.collect(prefix, out)
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.net.collect_mut(prefix, out)
    }
}

/// Builds an encoder with parameters drawn deterministically from `seed`.
pub fn build_encoder<T: Real>(
    cfg: &EncoderConfig,
    series_length: usize,
    channels: usize,
    seed: u64,
) -> Result<Encoder<T>> {
    cfg.validate()?;
    if series_length == 0 || channels == 0 {
        return Err(Error::config(
            "series_length",
            "series length and channels must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.hidden;
    let net = match cfg.family {
        Family::Mlp => Network::Mlp(Mlp::new(&cfg.mlp, series_length * channels, h, &mut rng)),
        Family::Cnn => Network::Cnn(Fcn::new(&cfg.conv, channels, h, &mut rng)),
        Family::ResNet => Network::ResNet(ResNet::new(&cfg.conv, channels, h, &mut rng)),
        Family::Inception => Network::Inception(Inception::new(&cfg.inception, channels, h, &mut rng)),
        Family::Transformer => Network::Transformer(PatchTransformer::new(
            &cfg.transformer,
            series_length,
            channels,
            h,
            &mut rng,
        )),
    };
    Ok(Encoder {
        config: cfg.clone(),
        series_length,
        channels,
        net,
    })
}

impl<T: Real> Encoder<T> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn series_length(&self) -> usize {
        self.series_length
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn latent_len(&self) -> usize {
        self.config.latent_len(self.series_length)
    }

    /// Branch kernel sizes of the inception blocks; empty for other families.
    pub fn branch_kernel_sizes(&self) -> Vec<usize> {
        match &self.net {
            Network::Inception(n) => n.blocks[0].kernel_sizes(),
            _ => Vec::new(),
        }
    }

    /// `[B, T, d] -> [B, L, h]`. `train` selects batch statistics in the
    /// normalization layers and updates their running averages.
    pub fn encode(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![self.series_length, self.channels],
            });
        }
        if shape[1] != self.series_length {
            return Err(Error::LengthMismatch {
                expected: self.series_length,
                got: shape[1],
            });
        }
        match &mut self.net {
            Network::Mlp(n) => n.forward(tape, x),
            Network::Cnn(n) => n.forward(tape, x, train),
            Network::ResNet(n) => n.forward(tape, x, train),
            Network::Inception(n) => n.forward(tape, x, train),
            Network::Transformer(n) => n.forward(tape, x),
        }
    }
}

/// `[B, L, h] -> [B, C]` affine map.
#[derive(Debug, Clone)]
pub struct LinearHead<T> {
    pub linear: Linear<T>,
}
crate::impl_module!(LinearHead { linear });

impl<T: Real> LinearHead<T> {
    pub fn new(hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearHead {
            linear: Linear::new(hidden, classes, Init::KaimingUniform, &mut rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.outputs()
    }

    /// Logits from `[B, h]` features.
    pub fn classify(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        self.linear.forward(tape, features)
    }

    /// Mean-pools the latent tokens, then classifies.
    pub fn pool_and_classify(&self, tape: &mut Tape<T>, enc_out: Var) -> Result<Var> {
        let pooled = tape.mean_axis(enc_out, 1)?;
        self.classify(tape, pooled)
    }
}

/// Puts `[B, T, d]` into channel-major `[B, d, T]` for convolution.
pub(crate) fn to_channels_first<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 1])
}

/// `[B, h, T]` convolution features to `[B, T, h]` tokens.
pub(crate) fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(tape: &mut Tape<f64>, b: usize, t: usize) -> Var {
        let data = (0..b * t).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        tape.constant(&[b, t, 1], data).unwrap()
    }

    #[test]
    fn shape_contract_all_families() {
        for family in Family::ALL {
            let cfg = EncoderConfig::new(family, 128);
            let mut enc = build_encoder::<f64>(&cfg, 64, 1, 1).unwrap();
            let mut tape = Tape::new();
            let x = input(&mut tape, 2, 64);
            let z = enc.encode(&mut tape, x, true).unwrap();
            assert_eq!(tape.shape(z), &[2, enc.latent_len(), 128], "{family}");
            let expected_l = match family {
                Family::Mlp => 1,
                Family::Transformer => 8,
                _ => 64,
            };
            assert_eq!(enc.latent_len(), expected_l);
        }
    }

    #[test]
    fn deterministic_build() {
        for family in Family::ALL {
            let cfg = EncoderConfig::new(family, 32);
            let a = build_encoder::<f32>(&cfg, 16, 1, 9).unwrap();
            let b = build_encoder::<f32>(&cfg, 16, 1, 9).unwrap();
            let c = build_encoder::<f32>(&cfg, 16, 1, 10).unwrap();
            assert_eq!(a.checksum(), b.checksum(), "{family}");
            assert_ne!(a.checksum(), c.checksum(), "{family}");
        }
    }

    #[test]
    fn transformer_heads_must_divide_hidden() {
        let mut cfg = EncoderConfig::new(Family::Transformer, 130);
        cfg.transformer.heads = 4;
        match build_encoder::<f32>(&cfg, 64, 1, 0) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("expected invalid config, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn inception_bounds() {
        let mut cfg = EncoderConfig::new(Family::Inception, 16);
        cfg.inception.n_kernels = 9;
        assert!(cfg.validate().is_err());
        cfg.inception.n_kernels = 0;
        assert!(cfg.validate().is_err());
        cfg.inception.n_kernels = 5;
        cfg.inception.kernel_size = 1;
        assert!(cfg.validate().is_err());
        cfg.inception.kernel_size = 16;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn best_grid_cell_builds() {
        let mut cfg = EncoderConfig::new(Family::Inception, 128);
        cfg.inception.n_kernels = 5;
        cfg.inception.kernel_size = 16;
        let enc = build_encoder::<f32>(&cfg, 64, 1, 0).unwrap();
        assert_eq!(enc.branch_kernel_sizes(), vec![16, 32, 48, 64, 80]);
    }

    #[test]
    fn branch_sizes_scale_with_base_kernel() {
        let mut cfg = EncoderConfig::new(Family::Inception, 16);
        cfg.inception.n_kernels = 3;
        cfg.inception.kernel_size = 8;
        let enc = build_encoder::<f32>(&cfg, 32, 1, 0).unwrap();
        assert_eq!(enc.branch_kernel_sizes(), vec![8, 16, 24]);
    }

    #[test]
    fn length_mismatch() {
        let cfg = EncoderConfig::new(Family::Cnn, 16);
        let mut enc = build_encoder::<f64>(&cfg, 32, 1, 0).unwrap();
        let mut tape = Tape::new();
        let x = input(&mut tape, 1, 31);
        assert!(matches!(
            enc.encode(&mut tape, x, false),
            Err(Error::LengthMismatch { expected: 32, got: 31 })
        ));
    }

    #[test]
    fn mlp_zero_input_gives_zero_token() {
        let cfg = EncoderConfig::new(Family::Mlp, 8);
        let mut enc = build_encoder::<f64>(&cfg, 16, 1, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 16, 1], vec![0.0; 32]).unwrap();
        let z = enc.encode(&mut tape, x, true).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_pooling_and_bias() {
        let mut head = LinearHead::<f64>::new(3, 2, 0);
        head.linear.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        head.linear.bias.data_mut().copy_from_slice(&[0.5, -1.5]);
        let mut tape = Tape::new();
        let z = tape.constant(&[2, 4, 3], (0..24).map(f64::from).collect()).unwrap();
        let logits = head.pool_and_classify(&mut tape, z).unwrap();
        assert_eq!(tape.value(logits), &[0.5, -1.5, 0.5, -1.5]);

        // with one token, pooling is the identity
        let head = LinearHead::<f64>::new(3, 2, 1);
        let single = tape.constant(&[1, 1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let flat = tape.constant(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let a = head.pool_and_classify(&mut tape, single).unwrap();
        let b = head.classify(&mut tape, flat).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("lstm".parse::<Family>().is_err());
    }
}
