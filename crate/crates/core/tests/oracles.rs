mod common;

use common::{attention_case, conv_case, max_abs_diff, naive_conv1d, rng, uniform};
use rand::Rng;
use tsc_core::tensor::{Padding, Tape};

const TOL: f64 = 1e-6;

#[test]
fn conv1d_matches_nested_loops() {
    for seed in 0..40 {
        let (label, diff) = conv_case(seed);
        assert!(diff < TOL, "{label}: {diff:e}");
    }
}

#[test]
fn attention_matches_nested_loops() {
    for seed in 0..40 {
        let (label, diff) = attention_case(seed);
        assert!(diff < TOL, "{label}: {diff:e}");
    }
}

#[test]
fn matmul_matches_nested_loops() {
    for seed in 0..20 {
        let mut r = rng(900 + seed);
        let (m, k, n) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let (a, b) = (uniform(&mut r, m * k), uniform(&mut r, k * n));
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(&[m, k], a.clone()).unwrap();
        let bv = tape.constant(&[k, n], b.clone()).unwrap();
        let out = tape.matmul(av, bv).unwrap();
        let mut expected = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                expected[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        assert!(max_abs_diff(tape.value(out), &expected) < 1e-12);
    }
}

#[test]
fn f32_conv_tracks_f64() {
    let mut r = rng(77);
    let x = uniform(&mut r, 2 * 3 * 50);
    let w = uniform(&mut r, 4 * 3 * 7);
    let bias = uniform(&mut r, 4);
    let mut t32 = Tape::<f32>::new();
    let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let xv = t32.constant(&[2, 3, 50], cast(&x)).unwrap();
    let wv = t32.constant(&[4, 3, 7], cast(&w)).unwrap();
    let bv = t32.constant(&[4], cast(&bias)).unwrap();
    let out = t32.conv1d(xv, wv, bv, Padding::Same).unwrap();
    let got: Vec<f64> = t32.value(out).iter().map(|&v| v as f64).collect();
    let expected = naive_conv1d(&x, &w, &bias, (2, 3, 50), (4, 7), (3, 3));
    assert!(max_abs_diff(&got, &expected) < 1e-5);
}
