//! Training protocol and the two summary metrics.

use std::fmt;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::backbone::HybridModel;
use crate::data::{batch_iter, Dataset};
use crate::encoders::{Encoder, LinearHead};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::tensor::{Adam, Module, Real, Tape, Var};

const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(
                "precision",
                format!("expected f32 or f64, got {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub curve: Vec<EpochRecord>,
    pub max_test_acc: f64,
    pub min_loss_acc: f64,
    pub wall_s: f64,
    pub config: TrainConfig,
}

impl RunResult {
    /// Writes `epoch,train_loss,test_acc` rows.
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,train_loss,test_acc")?;
        for r in &self.curve {
            writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.test_acc)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(max test accuracy, test accuracy at the earliest epoch of minimum
/// training loss)`.
pub fn compute_metrics(curve: &[EpochRecord]) -> Result<(f64, f64)> {
    let first = curve.first().ok_or(Error::EmptyCurve)?;
    let max_acc = curve.iter().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max);
    let best = curve
        .iter()
        .fold(first, |best, r| if r.train_loss < best.train_loss { r } else { best });
    Ok((max_acc, best.test_acc))
}

/// A model mapping `[B, T, d]` batches to `[B, C]` logits.
pub trait Classifier<T: Real>: Module<T> {
    fn logits(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var>;
    fn num_classes(&self) -> usize;
    /// `(T, d)` expected by the encoder.
    fn input_shape(&self) -> (usize, usize);
}

/// Encoder, mean pooling over latent tokens, linear head.
#[derive(Debug, Clone)]
pub struct PlainModel<T> {
    pub encoder: Encoder<T>,
    pub head: LinearHead<T>,
}
impl_module!(PlainModel { encoder, head });

impl<T: Real> PlainModel<T> {
    pub fn new(encoder: Encoder<T>, classes: usize, head_seed: u64) -> Self {
        let head = LinearHead::new(encoder.hidden(), classes, head_seed);
        PlainModel { encoder, head }
    }
}

impl<T: Real> Classifier<T> for PlainModel<T> {
    fn logits(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        let z = self.encoder.encode(tape, x, train)?;
        self.head.pool_and_classify(tape, z)
    }

    fn num_classes(&self) -> usize {
        self.head.classes()
    }

    fn input_shape(&self) -> (usize, usize) {
        (self.encoder.series_length(), self.encoder.channels())
    }
}

impl<T: Real> Classifier<T> for HybridModel<T> {
    fn logits(&mut self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<Var> {
        self.forward(tape, x, train)
    }

    fn num_classes(&self) -> usize {
        self.head.classes()
    }

    fn input_shape(&self) -> (usize, usize) {
        (self.encoder.series_length(), self.encoder.channels())
    }
}

fn batch_input<T: Real>(tape: &mut Tape<T>, values: &[f64], len: usize, channels: usize) -> Result<Var> {
    let b = values.len() / (len * channels);
    tape.constant(
        &[b, len, channels],
        values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_fits<T: Real, M: Classifier<T>>(model: &M, ds: &Dataset) -> Result<()> {
    let (len, channels) = model.input_shape();
    if ds.series_length != len || ds.channels != channels {
        return Err(Error::DatasetMismatch(format!(
            "{} has series {}x{}, model expects {len}x{channels}",
            ds.name, ds.series_length, ds.channels
        )));
    }
    if ds.num_classes > model.num_classes() {
        return Err(Error::DatasetMismatch(format!(
            "{} has {} classes, model has {}",
            ds.name,
            ds.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

/// Fraction of samples whose argmax logit equals the label, in inference
/// mode.
pub fn evaluate<T: Real, M: Classifier<T>>(model: &mut M, ds: &Dataset) -> Result<f64> {
    check_fits(model, ds)?;
    let (len, channels) = model.input_shape();
    let classes = model.num_classes();
    let mut correct = 0usize;
    for batch in batch_iter(ds, EVAL_BATCH, false, 0)? {
        let mut tape = Tape::new();
        let x = batch_input(&mut tape, &batch.values, len, channels)?;
        let logits = model.logits(&mut tape, x, false)?;
        correct += tape
            .value(logits)
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Seed of the shuffle for one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Adam on mean cross-entropy for `cfg.epochs` epochs, evaluating test
/// accuracy after each one. Only tensors with `requires_grad` change.
pub fn train_run<T: Real, M: Classifier<T>>(
    model: &mut M,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    train_run_observed(model, train, test, cfg, |_| ControlFlow::Continue(()))
}

/// [`train_run`] that hands every finished epoch to `observe`. Returning
/// `Break` ends the run there; the result covers the epochs completed.
pub fn train_run_observed<T: Real, M: Classifier<T>>(
    model: &mut M,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    train.check_compatible(test)?;
    check_fits(model, train)?;
    let start = Instant::now();
    let (len, channels) = model.input_shape();
    let mut adam = Adam::<T>::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        for (bi, batch) in batch_iter(train, cfg.batch_size, true, epoch_seed(cfg.seed, epoch))?.enumerate() {
            let mut tape = Tape::new();
            let x = batch_input(&mut tape, &batch.values, len, channels)?;
            let logits = model.logits(&mut tape, x, true)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(loss)?;
            let mut params = model.tensors_mut();
            for p in params.iter_mut() {
                p.zero_grad();
            }
            tape.write_grads(params.iter_mut().map(|p| &mut **p))?;
            adam.step(&mut params)?;
        }
        let test_acc = evaluate(model, test)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.5} acc {test_acc:.4}");
        let record = EpochRecord {
            epoch,
            train_loss,
            test_acc,
        };
        curve.push(record);
        if observe(&record).is_break() {
            break;
        }
    }
    let (max_test_acc, min_loss_acc) = compute_metrics(&curve)?;
    Ok(RunResult {
        curve,
        max_test_acc,
        min_loss_acc,
        wall_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}
