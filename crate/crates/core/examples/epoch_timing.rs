//! Seconds per training epoch of each encoder family on the two-class sine
//! task, plain and hybrid.
//!
//! `cargo run --release --example epoch_timing -- [EPOCHS] [FAMILY|hybrid] [SAMPLES]`

use std::sync::Arc;
use std::time::Instant;

use tsc_core::backbone::{build_backbone, BackboneConfig, HybridModel};
use tsc_core::data::{synthetic::SineTask, znormalize};
use tsc_core::encoders::{build_encoder, EncoderConfig, Family};
use tsc_core::trainer::{train_run, PlainModel, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let only = args.get(2).cloned();
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let (train, test) = SineTask::two_class(64, 0.1).generate(n, n, 7);
    let (train, test) = (znormalize(&train), znormalize(&test));
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    for family in Family::ALL {
        if only.as_deref().is_some_and(|o| o != family.name()) {
            continue;
        }
        let enc = build_encoder::<f32>(&EncoderConfig::new(family, 128), 64, 1, 1).unwrap();
        let mut m = PlainModel::new(enc, 2, 2);
        let t = Instant::now();
        let r = train_run(&mut m, &train, &test, &cfg).unwrap();
        println!(
            "{family:12} plain  {:.2}s/epoch max {:.3}",
            t.elapsed().as_secs_f64() / epochs as f64,
            r.max_test_acc
        );
    }
    if only.as_deref().is_some_and(|o| o != "hybrid") {
        return;
    }
    let bb = Arc::new(build_backbone::<f32>(&BackboneConfig::default()).unwrap());
    let enc = build_encoder::<f32>(&EncoderConfig::new(Family::Inception, 128), 64, 1, 1).unwrap();
    let mut m = HybridModel::new(enc, bb, 2, 2).unwrap();
    let t = Instant::now();
    let r = train_run(&mut m, &train, &test, &cfg).unwrap();
    println!(
        "inception    hybrid {:.2}s/epoch max {:.3}",
        t.elapsed().as_secs_f64() / epochs as f64,
        r.max_test_acc
    );
}
