//! Experiment matrix and grid-search driver.
//!
//! Every run is identified by a [`RunKey`]. Keys are executed in a
//! documented order (dataset, family, mode, then learning rate from largest
//! to smallest, kernel count and kernel size ascending) by a bounded pool
//! of workers; one writer appends each finished row to `results.csv`, so an
//! interrupted experiment resumes by skipping keys already present.

pub mod config;
mod results;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{mpsc, Arc};
use std::time::Instant;

use rayon::prelude::*;

pub use results::{fmt6, round6, Aggregate, CsvAppender, ResultRow, ResultsTable, CSV_HEADER, STATUS_OK};

use crate::backbone::{build_backbone, import_backbone, BackboneConfig, FrozenBackbone, HybridModel};
use crate::data::{load_ucr_pair, znormalize, Dataset};
use crate::encoders::{build_encoder, EncoderConfig, Family};
use crate::error::{Error, Result};
use crate::tensor::{Fnv1a, Real};
use crate::trainer::{train_run, PlainModel, Precision, RunResult, TrainConfig};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_MD: &str = "results.md";
pub const CURVES_DIR: &str = "curves";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Encoder, mean pooling and a linear head.
    Plain,
    /// Encoder stacked on the frozen backbone.
    Hybrid,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(Mode::Plain),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::config(
                "mode",
                format!("expected plain or hybrid, got {other:?}"),
            )),
        }
    }
}

/// Hyperparameters of one inception grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub lr: f64,
    pub n_kernels: usize,
    pub kernel_size: usize,
}

impl GridPoint {
    /// Learning rate descending, then kernel count and size ascending.
    pub fn cmp_order(&self, other: &GridPoint) -> Ordering {
        other
            .lr
            .total_cmp(&self.lr)
            .then(self.n_kernels.cmp(&other.n_kernels))
            .then(self.kernel_size.cmp(&other.kernel_size))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxes {
    pub lrs: Vec<f64>,
    pub n_kernels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
}

impl Default for GridAxes {
    /// Learning rates {1e-3, 1e-4, 1e-5}, kernel counts {3, 4, 5, 6} and
    /// base kernel sizes {8, 16}.
    fn default() -> Self {
        GridAxes {
            lrs: vec![1e-3, 1e-4, 1e-5],
            n_kernels: vec![3, 4, 5, 6],
            kernel_sizes: vec![8, 16],
        }
    }
}

impl GridAxes {
    /// Every combination once, in grid order.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        if self.lrs.is_empty() || self.n_kernels.is_empty() || self.kernel_sizes.is_empty() {
            return Err(Error::config("grid", "every grid axis needs at least one value"));
        }
        if self.lrs.iter().any(|&lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(Error::config("lrs", "learning rates must be positive"));
        }
        let mut points = Vec::new();
        for &lr in &self.lrs {
            for &n_kernels in &self.n_kernels {
                for &kernel_size in &self.kernel_sizes {
                    points.push(GridPoint {
                        lr,
                        n_kernels,
                        kernel_size,
                    });
                }
            }
        }
        points.sort_by(GridPoint::cmp_order);
        points.dedup_by(|a, b| a.cmp_order(b) == Ordering::Equal);
        Ok(points)
    }
}

/// Identity of one run in the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunKey {
    pub dataset: String,
    pub family: Family,
    pub mode: Mode,
    pub lr: f64,
    /// Set for the inception family only.
    pub n_kernels: Option<usize>,
    pub kernel_size: Option<usize>,
}

impl RunKey {
    pub fn cmp_order(&self, other: &RunKey) -> Ordering {
        (&self.dataset, self.family, self.mode)
            .cmp(&(&other.dataset, other.family, other.mode))
            .then(other.lr.total_cmp(&self.lr))
            .then((self.n_kernels, self.kernel_size).cmp(&(other.n_kernels, other.kernel_size)))
    }

    /// Same run after a CSV round trip.
    fn matches(&self, other: &RunKey) -> bool {
        self.dataset == other.dataset
            && self.family == other.family
            && self.mode == other.mode
            && round6(self.lr) == round6(other.lr)
            && self.n_kernels == other.n_kernels
            && self.kernel_size == other.kernel_size
    }
}

/// Stable seed of a run: FNV-1a over the master seed, dataset name, family
/// and mode. Adding datasets or families leaves existing seeds unchanged.
pub fn run_seed(master: u64, dataset: &str, family: Family, mode: Mode) -> u64 {
    let mut h = Fnv1a::default();
    h.write_u64(master);
    for part in [dataset, family.name(), mode.name()] {
        h.write(part.as_bytes());
        h.write(&[0]);
    }
    h.finish()
}

fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Fnv1a::default();
    h.write_u64(seed);
    h.write(tag.as_bytes());
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub data_dir: PathBuf,
    pub datasets: Vec<String>,
    pub families: Vec<Family>,
    pub modes: Vec<Mode>,
    /// `train.seed` is the master seed.
    pub train: TrainConfig,
    /// Template for every family; `family` is replaced per run.
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub backbone_weights: Option<PathBuf>,
    pub grid: GridAxes,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub znormalize: bool,
    /// Also write a per-epoch curve CSV for every run.
    pub save_curves: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            data_dir: PathBuf::from("data"),
            datasets: Vec::new(),
            families: vec![Family::Inception],
            modes: vec![Mode::Plain, Mode::Hybrid],
            train: TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            },
            encoder: EncoderConfig::new(Family::Inception, 128),
            backbone: BackboneConfig::default(),
            backbone_weights: None,
            grid: GridAxes::default(),
            out_dir: PathBuf::from("out"),
            workers: 1,
            znormalize: true,
            save_curves: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::config("datasets", "at least one dataset is required"));
        }
        if self.families.is_empty() {
            return Err(Error::config("encoder", "at least one encoder family is required"));
        }
        if self.modes.is_empty() {
            return Err(Error::config("mode", "at least one mode is required"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        self.train.validate()?;
        for &family in &self.families {
            self.encoder_for(family).validate()?;
        }
        if self.modes.contains(&Mode::Hybrid) {
            self.backbone.validate()?;
            if self.backbone.hidden != self.encoder.hidden {
                return Err(Error::config(
                    "hidden",
                    format!(
                        "encoder width {} differs from backbone width {}",
                        self.encoder.hidden, self.backbone.hidden
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn encoder_for(&self, family: Family) -> EncoderConfig {
        EncoderConfig {
            family,
            ..self.encoder.clone()
        }
    }

    fn key(&self, dataset: &str, family: Family, mode: Mode, lr: f64) -> RunKey {
        let inception = family == Family::Inception;
        RunKey {
            dataset: dataset.to_string(),
            family,
            mode,
            lr,
            n_kernels: inception.then_some(self.encoder.inception.n_kernels),
            kernel_size: inception.then_some(self.encoder.inception.kernel_size),
        }
    }

    /// Runs of the experiment matrix, in order.
    pub fn matrix_jobs(&self) -> Vec<Job> {
        let mut datasets = self.datasets.clone();
        datasets.sort();
        datasets.dedup();
        let mut families = self.families.clone();
        families.sort();
        families.dedup();
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        let mut jobs = Vec::new();
        for dataset in &datasets {
            for &family in &families {
                for &mode in &modes {
                    jobs.push(Job {
                        key: self.key(dataset, family, mode, self.train.lr),
                        encoder: self.encoder_for(family),
                        train: TrainConfig {
                            seed: run_seed(self.train.seed, dataset, family, mode),
                            ..self.train.clone()
                        },
                    });
                }
            }
        }
        jobs
    }

    /// Inception runs for every grid point, dataset and mode, in order.
    pub fn grid_jobs(&self) -> Result<Vec<Job>> {
        let points = self.grid.points()?;
        let mut jobs = Vec::new();
        for job in self
            .matrix_jobs()
            .into_iter()
            .filter(|j| j.key.family == Family::Inception)
        {
            for p in &points {
                let mut encoder = job.encoder.clone();
                encoder.inception.n_kernels = p.n_kernels;
                encoder.inception.kernel_size = p.kernel_size;
                jobs.push(Job {
                    key: RunKey {
                        lr: p.lr,
                        n_kernels: Some(p.n_kernels),
                        kernel_size: Some(p.kernel_size),
                        ..job.key.clone()
                    },
                    encoder,
                    train: TrainConfig {
                        lr: p.lr,
                        ..job.train.clone()
                    },
                });
            }
        }
        if jobs.is_empty() {
            return Err(Error::config("encoder", "grid search needs the inception family"));
        }
        Ok(jobs)
    }

    /// The spec as `key = value` lines readable by the command line tool.
    pub fn to_config_text(&self) -> String {
        config::spec_to_text(self)
    }
}

/// A single training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub key: RunKey,
    pub encoder: EncoderConfig,
    /// `train.seed` is the run seed.
    pub train: TrainConfig,
}

/// What a finished experiment produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub table: ResultsTable,
    /// Rows computed by this invocation; the rest were already present.
    pub executed: usize,
}

pub fn run_matrix(spec: &ExperimentSpec) -> Result<Outcome> {
    spec.validate()?;
    execute(spec, spec.matrix_jobs())
}

/// Runs the inception grid and returns the table of per-run rows; use
/// [`ResultsTable::grid_summary`] for the per-point averages.
pub fn grid_search(spec: &ExperimentSpec) -> Result<Outcome> {
    spec.validate()?;
    for &n in &spec.grid.n_kernels {
        let mut cfg = spec.encoder_for(Family::Inception);
        cfg.inception.n_kernels = n;
        for &k in &spec.grid.kernel_sizes {
            cfg.inception.kernel_size = k;
            cfg.validate()?;
        }
    }
    let jobs = spec.grid_jobs()?;
    execute(spec, jobs)
}

/// Writes `results.csv` in enumeration order and `results.md`.
pub fn emit_reports(table: &ResultsTable, datasets: &[String], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut sorted = table.clone();
    sorted.sort();
    sorted.save_csv(&out_dir.join(RESULTS_CSV))?;
    fs::write(out_dir.join(RESULTS_MD), sorted.to_markdown(datasets))?;
    Ok(())
}

type DataMap = BTreeMap<String, (Dataset, Dataset)>;

fn load_data(spec: &ExperimentSpec, jobs: &[Job]) -> Result<DataMap> {
    let mut data = DataMap::new();
    for job in jobs {
        if data.contains_key(&job.key.dataset) {
            continue;
        }
        let (mut train, mut test) = load_ucr_pair(&spec.data_dir, &job.key.dataset)?;
        if spec.znormalize {
            train = znormalize(&train);
            test = znormalize(&test);
        }
        data.insert(job.key.dataset.clone(), (train, test));
    }
    Ok(data)
}

fn execute(spec: &ExperimentSpec, jobs: Vec<Job>) -> Result<Outcome> {
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("config.txt"), spec.to_config_text())?;
    let csv_path = spec.out_dir.join(RESULTS_CSV);
    let mut table = if csv_path.exists() {
        ResultsTable::load_csv(&csv_path)?
    } else {
        ResultsTable::default()
    };
    let pending: Vec<Job> = jobs
        .into_iter()
        .filter(|j| !table.rows.iter().any(|r| r.key.matches(&j.key)))
        .collect();
    log::info!("{} runs pending, {} already recorded", pending.len(), table.len());
    let executed = pending.len();
    if !pending.is_empty() {
        let data = load_data(spec, &pending)?;
        match spec.train.precision {
            Precision::F32 => run_pending::<f32>(spec, &pending, &data, &csv_path, &mut table)?,
            Precision::F64 => run_pending::<f64>(spec, &pending, &data, &csv_path, &mut table)?,
        }
    }
    let mut datasets = spec.datasets.clone();
    datasets.sort();
    datasets.dedup();
    table.sort();
    emit_reports(&table, &datasets, &spec.out_dir)?;
    Ok(Outcome { table, executed })
}

fn shared_backbone<T: Real>(spec: &ExperimentSpec, jobs: &[Job]) -> Result<Option<Arc<FrozenBackbone<T>>>> {
    if !jobs.iter().any(|j| j.key.mode == Mode::Hybrid) {
        return Ok(None);
    }
    let bb = match &spec.backbone_weights {
        Some(path) => import_backbone(&spec.backbone, path)?,
        None => build_backbone(&spec.backbone)?,
    };
    Ok(Some(Arc::new(bb)))
}

fn run_pending<T: Real>(
    spec: &ExperimentSpec,
    jobs: &[Job],
    data: &DataMap,
    csv_path: &Path,
    table: &mut ResultsTable,
) -> Result<()> {
    let backbone = shared_backbone::<T>(spec, jobs)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let mut appender = CsvAppender::open(csv_path)?;
    let curves = spec.save_curves.then(|| spec.out_dir.join(CURVES_DIR));
    if let Some(dir) = &curves {
        fs::create_dir_all(dir)?;
    }
    let (tx, rx) = mpsc::channel::<(ResultRow, Option<RunResult>)>();
    std::thread::scope(|scope| -> Result<()> {
        let backbone = &backbone;
        scope.spawn(move || {
            pool.install(|| {
                jobs.par_iter().for_each_with(tx, |tx, job| {
                    let (train, test) = &data[&job.key.dataset];
                    let started = Instant::now();
                    let outcome = run_job::<T>(job, train, test, backbone.clone());
                    let _ = tx.send(to_row(job, outcome, started));
                });
            })
        });
        for (row, result) in rx {
            log::info!(
                "{} {} {} lr={} -> {}",
                row.key.dataset,
                row.key.family,
                row.key.mode,
                fmt6(row.key.lr),
                row.max_test_acc.map(fmt6).unwrap_or_else(|| row.status.clone())
            );
            appender.append(&row)?;
            if let (Some(dir), Some(result)) = (&curves, &result) {
                result.write_curve(&dir.join(curve_file_name(&row.key)))?;
            }
            table.rows.push(row);
        }
        Ok(())
    })
}

fn curve_file_name(key: &RunKey) -> String {
    let mut name = format!("{}_{}_{}_lr{}", key.dataset, key.family, key.mode, fmt6(key.lr));
    if let (Some(n), Some(k)) = (key.n_kernels, key.kernel_size) {
        name.push_str(&format!("_n{n}_k{k}"));
    }
    name + ".csv"
}

fn to_row(job: &Job, outcome: Result<RunResult>, started: Instant) -> (ResultRow, Option<RunResult>) {
    let base = ResultRow {
        key: job.key.clone(),
        seed: job.train.seed,
        max_test_acc: None,
        min_loss_acc: None,
        epochs: job.train.epochs,
        wall_s: started.elapsed().as_secs_f64(),
        status: STATUS_OK.into(),
    };
    match outcome {
        Ok(result) => (
            ResultRow {
                max_test_acc: Some(result.max_test_acc),
                min_loss_acc: Some(result.min_loss_acc),
                epochs: result.curve.len(),
                wall_s: result.wall_s,
                ..base
            },
            Some(result),
        ),
        Err(e) => (
            ResultRow {
                status: format!("error: {}", e.to_string().replace(['\n', '\r'], " ")),
                ..base
            },
            None,
        ),
    }
}

/// Builds the model of `job` and trains it.
pub fn run_job<T: Real>(
    job: &Job,
    train: &Dataset,
    test: &Dataset,
    backbone: Option<Arc<FrozenBackbone<T>>>,
) -> Result<RunResult> {
    let seed = job.train.seed;
    let encoder = build_encoder::<T>(
        &job.encoder,
        train.series_length,
        train.channels,
        sub_seed(seed, "encoder"),
    )?;
    let head_seed = sub_seed(seed, "head");
    match job.key.mode {
        Mode::Plain => {
            let mut model = PlainModel::new(encoder, train.num_classes, head_seed);
            train_run(&mut model, train, test, &job.train)
        }
        Mode::Hybrid => {
            let backbone = backbone.ok_or_else(|| Error::config("mode", "hybrid run without a backbone"))?;
            let mut model = HybridModel::new(encoder, backbone, train.num_classes, head_seed)?;
            train_run(&mut model, train, test, &job.train)
        }
    }
}
