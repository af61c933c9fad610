#![allow(dead_code)]

pub mod cases;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsc_core::tensor::{Module, Padding, Tape, Var};
use tsc_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero.
const REL_FLOOR: f64 = 1e-6;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Contracts `out` against fixed random weights so every output element
/// contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = uniform(&mut rng(seed ^ 0xABCD), n);
    let w = tape.constant(&shape, weights)?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Largest relative error between tape gradients and central differences
/// for every element of every input.
pub fn check_op(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| uniform(&mut r, s.iter().product())).collect();
    let eval = |values: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = shapes
            .iter()
            .zip(values)
            .map(|(s, v)| tape.variable(s, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let loss = project(&mut tape, out, seed)?;
        Ok((tape, vars, loss))
    };
    let (mut tape, vars, loss) = eval(&inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    let mut worst = 0.0f64;
    let mut perturbed = inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            perturbed[i][j] = inputs[i][j] + FD_STEP;
            let (t, _, l) = eval(&perturbed)?;
            let plus = t.value(l)[0];
            perturbed[i][j] = inputs[i][j] - FD_STEP;
            let (t, _, l) = eval(&perturbed)?;
            let minus = t.value(l)[0];
            perturbed[i][j] = inputs[i][j];
            worst = worst.max(rel_err(analytic[i][j], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Same check for every trainable scalar of a module, with `loss` building
/// the scalar objective on a fresh tape.
pub fn check_module<M: Module<f64>>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, &mut Tape<f64>) -> Result<Var>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    tape.backward(l)?;
    for t in model.tensors_mut() {
        t.zero_grad();
    }
    tape.write_grads(model.tensors_mut())?;
    let analytic: Vec<Option<Vec<f64>>> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| {
            t.requires_grad()
                .then(|| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        })
        .collect();
    let mut value = |model: &mut M| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(model, &mut tape)?;
        Ok(tape.value(l)[0])
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, grads) in analytic.iter().enumerate() {
        let Some(grads) = grads else { continue };
        for (j, &g) in grads.iter().enumerate() {
            let original = model.tensors_mut()[ti].data()[j];
            model.tensors_mut()[ti].data_mut()[j] = original + FD_STEP;
            let plus = value(model)?;
            model.tensors_mut()[ti].data_mut()[j] = original - FD_STEP;
            let minus = value(model)?;
            model.tensors_mut()[ti].data_mut()[j] = original;
            worst = worst.max(rel_err(g, (plus - minus) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Direct cross-correlation with explicit zero padding.
pub fn naive_conv1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (batch, c_in, len): (usize, usize, usize),
    (c_out, kernel): (usize, usize),
    (pad_left, pad_right): (usize, usize),
) -> Vec<f64> {
    let out_len = len + pad_left + pad_right - kernel + 1;
    let mut out = vec![0.0; batch * c_out * out_len];
    for bi in 0..batch {
        for co in 0..c_out {
            for t in 0..out_len {
                let mut acc = b[co];
                for ci in 0..c_in {
                    for k in 0..kernel {
                        let src = t as isize + k as isize - pad_left as isize;
                        if src >= 0 && (src as usize) < len {
                            acc += w[(co * c_in + ci) * kernel + k] * x[(bi * c_in + ci) * len + src as usize];
                        }
                    }
                }
                out[(bi * c_out + co) * out_len + t] = acc;
            }
        }
    }
    out
}

/// Attention on `[B, H, S, d]` with an explicit per-row softmax.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (b, h, s, d): (usize, usize, usize, usize),
    causal: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; b * h * s * d];
    let scale = 1.0 / (d as f64).sqrt();
    for g in 0..b * h {
        let base = g * s * d;
        for i in 0..s {
            let visible = if causal { i + 1 } else { s };
            let scores: Vec<f64> = (0..visible)
                .map(|j| (0..d).map(|c| q[base + i * d + c] * k[base + j * d + c]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out[base + i * d + c] = (0..visible).map(|j| e[j] / z * v[base + j * d + c]).sum();
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs the tape conv1d and the nested-loop reference on one random shape.
pub fn conv_case(seed: u64) -> (String, f64) {
    let mut r = rng(seed);
    let (b, c_in, c_out) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..6));
    let len = r.gen_range(1..20);
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let kernel = match padding {
        Padding::Same => r.gen_range(1..12),
        Padding::Valid => r.gen_range(1..=len),
    };
    let x = uniform(&mut r, b * c_in * len);
    let w = uniform(&mut r, c_out * c_in * kernel);
    let bias = uniform(&mut r, c_out);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(&[b, c_in, len], x.clone()).unwrap();
    let wv = tape.constant(&[c_out, c_in, kernel], w.clone()).unwrap();
    let bv = tape.constant(&[c_out], bias.clone()).unwrap();
    let out = tape.conv1d(xv, wv, bv, padding).unwrap();
    let expected = naive_conv1d(&x, &w, &bias, (b, c_in, len), (c_out, kernel), padding.split(kernel));
    let label = format!("B={b} C_in={c_in} T={len} C_out={c_out} K={kernel} {padding:?}");
    (label, max_abs_diff(tape.value(out), &expected))
}

/// Runs tape attention and the nested-loop reference on one random shape;
/// even seeds use the causal mask.
pub fn attention_case(seed: u64) -> (String, f64) {
    let mut r = rng(500 + seed);
    let dims = (
        r.gen_range(1..3),
        r.gen_range(1..4),
        r.gen_range(1..10),
        r.gen_range(1..7),
    );
    let causal = seed.is_multiple_of(2);
    let n = dims.0 * dims.1 * dims.2 * dims.3;
    let (q, k, v) = (uniform(&mut r, n), uniform(&mut r, n), uniform(&mut r, n));
    let shape = [dims.0, dims.1, dims.2, dims.3];
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(&shape, q.clone()).unwrap();
    let kv = tape.constant(&shape, k.clone()).unwrap();
    let vv = tape.constant(&shape, v.clone()).unwrap();
    let out = tape.attention(qv, kv, vv, causal).unwrap();
    let diff = max_abs_diff(tape.value(out), &naive_attention(&q, &k, &v, dims, causal));
    (format!("{shape:?} causal={causal}"), diff)
}

/// `(max |mean|, max |std - 1|)` over the series of a z-normalized split,
/// computed from scratch with population statistics.
pub fn znorm_stats(ds: &tsc_core::data::Dataset) -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for s in &ds.samples {
        let n = s.values.len() as f64;
        let mean = s.values.iter().sum::<f64>() / n;
        let var = s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        worst.0 = worst.0.max(mean.abs());
        worst.1 = worst.1.max((var.sqrt() - 1.0).abs());
    }
    worst
}

/// Flags that shrink every model so command line runs finish in seconds.
pub const SMALL_MODELS: &[&str] = &[
    "--hidden",
    "16",
    "--mlp-widths",
    "16",
    "--conv-channels",
    "8",
    "--conv-kernels",
    "3",
    "--depth",
    "2",
    "--bottleneck",
    "4",
    "--branch-filters",
    "4",
    "--tf-layers",
    "1",
    "--tf-heads",
    "2",
    "--bb-layers",
    "1",
    "--bb-heads",
    "2",
    "--bb-ff",
    "32",
];

pub fn tsc(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_tsc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("tsc binary runs")
}

/// Writes a small two-class dataset named `name` under `dir`.
pub fn synth(dir: &std::path::Path, name: &str, length: usize, n: usize) {
    let out = tsc(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--name",
        name,
        "--length",
        &length.to_string(),
        "--train",
        &n.to_string(),
        "--test",
        &n.to_string(),
        "--noise",
        "0.3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// results.csv lines with the wall-clock column blanked.
pub fn rows_without_wall_time(path: &std::path::Path) -> Vec<String> {
    let wall = tsc_core::experiment::CSV_HEADER
        .iter()
        .position(|&h| h == "wall_s")
        .unwrap();
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let mut fields: Vec<&str> = line.split(',').collect();
            if fields.len() > wall {
                fields[wall] = "";
            }
            fields.join(",")
        })
        .collect()
}
