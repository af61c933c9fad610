//! Gradient-check cases shared by the per-op tests and the acceptance run.

use std::sync::Arc;

use tsc_core::backbone::{build_backbone, BackboneConfig, HybridModel};
use tsc_core::encoders::{build_encoder, EncoderConfig, Family};
use tsc_core::tensor::{Padding, Tape, Var};
use tsc_core::trainer::{Classifier, PlainModel};
use tsc_core::Result;

use super::{check_module, check_op, rng, uniform};

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

impl OpCase {
    pub fn run(&self, seed: u64) -> Result<f64> {
        let shapes: Vec<&[usize]> = self.shapes.iter().map(Vec::as_slice).collect();
        check_op(&shapes, seed, self.f)
    }
}

fn case(name: &'static str, shapes: &[&[usize]], f: OpFn) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f,
    }
}

/// One case per differentiable tape op, with the main variants of each.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[4]], |t, v| Ok(t.scale(v[0], 0.7))),
        case("add_suffix", &[&[2, 3, 4], &[3, 4]], |t, v| t.add_suffix(v[0], v[1])),
        case("add_suffix_row", &[&[3, 5], &[5]], |t, v| t.add_suffix(v[0], v[1])),
        case("sum", &[&[3, 2]], |t, v| Ok(t.sum(v[0]))),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("permute_inner", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[1, 0, 2])),
        case("concat_axis0", &[&[1, 3], &[2, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        case("concat_axis1", &[&[2, 2, 3], &[2, 1, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        case("select", &[&[2, 4, 3]], |t, v| t.select(v[0], 1, 2)),
        case("mean_axis", &[&[2, 4, 3]], |t, v| t.mean_axis(v[0], 1)),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1], false)),
        case("bmm_trans_b", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true)),
        case("attention", &[&[1, 2, 4, 3], &[1, 2, 4, 3], &[1, 2, 4, 3]], |t, v| {
            t.attention(v[0], v[1], v[2], false)
        }),
        case(
            "attention_causal",
            &[&[2, 1, 5, 2], &[2, 1, 5, 2], &[2, 1, 5, 2]],
            |t, v| t.attention(v[0], v[1], v[2], true),
        ),
        case("conv1d_valid", &[&[2, 2, 7], &[3, 2, 3], &[3]], |t, v| {
            t.conv1d(v[0], v[1], v[2], Padding::Valid)
        }),
        case("conv1d_same_odd", &[&[2, 2, 6], &[3, 2, 3], &[3]], |t, v| {
            t.conv1d(v[0], v[1], v[2], Padding::Same)
        }),
        case("conv1d_same_even", &[&[1, 3, 6], &[2, 3, 4], &[2]], |t, v| {
            t.conv1d(v[0], v[1], v[2], Padding::Same)
        }),
        case("conv1d_long_kernel", &[&[1, 1, 3], &[2, 1, 8], &[2]], |t, v| {
            t.conv1d(v[0], v[1], v[2], Padding::Same)
        }),
        case("conv1d_pointwise", &[&[2, 3, 5], &[4, 3, 1], &[4]], |t, v| {
            t.conv1d(v[0], v[1], v[2], Padding::Same)
        }),
        case("maxpool1d", &[&[2, 2, 6]], |t, v| t.maxpool1d(v[0], 3)),
        case("relu", &[&[3, 4]], |t, v| Ok(t.relu(v[0]))),
        case("gelu", &[&[3, 4]], |t, v| Ok(t.gelu(v[0]))),
        case("softmax", &[&[3, 4]], |t, v| t.softmax(v[0], false)),
        case("softmax_causal", &[&[2, 4, 4]], |t, v| t.softmax(v[0], true)),
        case("batchnorm_train", &[&[3, 2, 4], &[2], &[2]], |t, v| {
            Ok(t.batchnorm(v[0], v[1], v[2], None)?.0)
        }),
        case("batchnorm_flat", &[&[5, 3], &[3], &[3]], |t, v| {
            Ok(t.batchnorm(v[0], v[1], v[2], None)?.0)
        }),
        case("batchnorm_eval", &[&[2, 2, 3], &[2], &[2]], |t, v| {
            let (mean, var) = ([0.1, -0.2], [0.8, 1.3]);
            Ok(t.batchnorm(v[0], v[1], v[2], Some((&mean, &var)))?.0)
        }),
        case("layernorm", &[&[2, 3, 5], &[5], &[5]], |t, v| {
            t.layernorm(v[0], v[1], v[2])
        }),
        case("cross_entropy", &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    ]
}

fn tiny_encoder(family: Family, hidden: usize) -> EncoderConfig {
    let mut cfg = EncoderConfig::new(family, hidden);
    cfg.mlp.widths = vec![6, 5];
    cfg.conv.channels = vec![4, 5];
    cfg.conv.kernels = vec![3, 2];
    cfg.inception.n_kernels = 2;
    cfg.inception.kernel_size = 2;
    cfg.inception.depth = 2;
    cfg.inception.bottleneck = 3;
    cfg.inception.branch_filters = 2;
    cfg.transformer.layers = 1;
    cfg.transformer.heads = 2;
    cfg.transformer.patch_len = 3;
    cfg
}

fn batch(tape: &mut Tape<f64>, b: usize, len: usize, seed: u64) -> Result<Var> {
    tape.constant(&[b, len, 1], uniform(&mut rng(seed), b * len))
}

/// Cross-entropy of a small plain model of `family` against central
/// differences over all of its parameters.
pub fn plain_model_check(family: Family) -> Result<(f64, usize)> {
    let (len, labels) = (8, [0usize, 1, 1]);
    let enc = build_encoder::<f64>(&tiny_encoder(family, 4), len, 1, 5)?;
    let mut model = PlainModel::new(enc, 2, 6);
    check_module(&mut model, |m, tape| {
        let x = batch(tape, labels.len(), len, 9)?;
        let logits = m.logits(tape, x, true)?;
        tape.cross_entropy(logits, &labels)
    })
}

/// Inception encoder, one-layer frozen backbone, `h = 16`, `T = 8`,
/// `B = 2`. Only encoder and head parameters are perturbed.
pub fn tiny_hybrid_check() -> Result<(f64, usize)> {
    let (len, hidden, labels) = (8, 16, [1usize, 0]);
    let enc = build_encoder::<f64>(&tiny_encoder(Family::Inception, hidden), len, 1, 3)?;
    let bb_cfg = BackboneConfig {
        layers: 1,
        heads: 2,
        ff_width: 32,
        max_context: 32,
        prompt_len: 2,
        ..BackboneConfig::with_hidden(hidden)
    };
    let backbone = Arc::new(build_backbone::<f64>(&bb_cfg)?);
    let mut model = HybridModel::new(enc, backbone, 3, 4)?;
    check_module(&mut model, |m, tape| {
        let x = batch(tape, labels.len(), len, 10)?;
        let logits = m.forward(tape, x, true)?;
        tape.cross_entropy(logits, &labels)
    })
}
