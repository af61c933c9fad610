//! The `tsc` command line tool.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::backbone::BackboneConfig;
use crate::data::save_ucr_split;
use crate::data::synthetic::SineTask;
use crate::encoders::{EncoderConfig, Family};
use crate::experiment::{
    config::parse_kv, emit_reports, grid_search, run_matrix, ExperimentSpec, GridAxes, Mode, Outcome, ResultsTable,
    RESULTS_CSV, RESULTS_MD,
};
use crate::trainer::{Precision, TrainConfig};

/// Environment variable capping the number of concurrent runs.
pub const THREADS_ENV: &str = "TSC_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "tsc",
    version,
    about = "Time series classification experiments",
    after_help = "Every run/grid flag can also be given in a key = value file passed with --config; flags on the command line win."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every dataset x encoder x mode combination.
    Run(RunArgs),
    /// Inception grid over learning rate, kernel count and kernel size.
    Grid(GridArgs),
    /// Rebuild results.md from an output directory's results.csv.
    Report(ReportArgs),
    /// Write a generated sine-mixture dataset in UCR format.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Encoder families, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "inception")]
    pub encoder: Vec<Family>,
    #[arg(long, value_delimiter = ',', default_value = "plain,hybrid")]
    pub mode: Vec<Mode>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "hybrid")]
    pub mode: Vec<Mode>,
    #[arg(long, value_delimiter = ',', default_value = "1e-3,1e-4,1e-5")]
    pub lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6")]
    pub nkernels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    pub ksizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Directory holding `<NAME>_TRAIN` / `<NAME>_TEST` files, directly or
    /// in a `<NAME>/` subdirectory.
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    /// Dataset names, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub datasets: Vec<String>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Master seed; every run derives its own seed from it.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "f32")]
    pub precision: Precision,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Concurrent runs (further capped by TSC_THREADS).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Keep series as loaded instead of z-normalizing them.
    #[arg(long)]
    pub no_znorm: bool,
    /// Write a per-epoch curve for every run under OUT/curves.
    #[arg(long)]
    pub curves: bool,

    /// Latent width of the encoders and hidden size of the backbone.
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, value_delimiter = ',')]
    pub mlp_widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub conv_channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub conv_kernels: Option<Vec<usize>>,
    /// Parallel convolution branches per inception block.
    #[arg(long)]
    pub n_kernels: Option<usize>,
    /// Base kernel size K; branch i uses K*i.
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    pub branch_filters: Option<usize>,
    #[arg(long)]
    pub tf_layers: Option<usize>,
    #[arg(long)]
    pub tf_heads: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,

    #[arg(long)]
    pub bb_layers: Option<usize>,
    #[arg(long)]
    pub bb_heads: Option<usize>,
    #[arg(long)]
    pub bb_ff: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub bb_seed: Option<u64>,
    /// Backbone weights in checkpoint format, replacing the seeded ones.
    #[arg(long)]
    pub bb_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of a previous run or grid.
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthTask {
    /// Period 32 against period 8.
    TwoClass,
    /// Long period, short period, or both.
    MultiScale,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "two-class")]
    pub task: SynthTask,
    /// Dataset name; defaults to the task's own name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn env_thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={v:?} is not a worker count"))?;
            Ok(Some(n.max(1)))
        }
        Err(_) => Ok(None),
    }
}

impl CommonArgs {
    /// Builds the spec shared by `run` and `grid`.
    pub fn spec(&self, families: Vec<Family>, modes: Vec<Mode>) -> anyhow::Result<ExperimentSpec> {
        let mut encoder = EncoderConfig::new(Family::Inception, self.hidden);
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $( if let Some(v) = &self.$field { $target = v.clone(); } )*
            };
        }
        set! {
            mlp_widths => encoder.mlp.widths,
            conv_channels => encoder.conv.channels,
            conv_kernels => encoder.conv.kernels,
            n_kernels => encoder.inception.n_kernels,
            kernel_size => encoder.inception.kernel_size,
            depth => encoder.inception.depth,
            bottleneck => encoder.inception.bottleneck,
            branch_filters => encoder.inception.branch_filters,
            tf_layers => encoder.transformer.layers,
            tf_heads => encoder.transformer.heads,
            patch_len => encoder.transformer.patch_len,
        }
        let mut backbone = BackboneConfig::with_hidden(self.hidden);
        set! {
            bb_layers => backbone.layers,
            bb_heads => backbone.heads,
            bb_ff => backbone.ff_width,
            max_context => backbone.max_context,
            prompt_len => backbone.prompt_len,
            bb_seed => backbone.seed,
        }
        let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let mut workers = self.workers.unwrap_or(available).max(1);
        if let Some(cap) = env_thread_cap()? {
            workers = workers.min(cap);
        }
        Ok(ExperimentSpec {
            data_dir: self.data_dir.clone(),
            datasets: self.datasets.clone(),
            families,
            modes,
            train: TrainConfig {
                lr: self.lr,
                epochs: self.epochs,
                batch_size: self.batch_size,
                seed: self.seed,
                precision: self.precision,
            },
            encoder,
            backbone,
            backbone_weights: self.bb_weights.clone(),
            grid: GridAxes::default(),
            out_dir: self.out.clone(),
            workers,
            znormalize: !self.no_znorm,
            save_curves: self.curves,
        })
    }
}

/// Splices the lines of a `--config FILE` in front of the explicit flags,
/// leaving out keys that are also given on the command line.
pub fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let strings: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config_path = None;
    let mut rest: Vec<OsString> = Vec::with_capacity(args.len());
    let mut i = 0;
    while i < args.len() {
        let s = &strings[i];
        if s == "--config" {
            let path = strings.get(i + 1).context("--config needs a file path")?;
            config_path = Some(PathBuf::from(path));
            i += 2;
            continue;
        }
        if let Some(path) = s.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(path));
            i += 1;
            continue;
        }
        rest.push(args[i].clone());
        i += 1;
    }
    let Some(path) = config_path else {
        return Ok(rest);
    };
    let Some(sub_pos) = strings.iter().position(|s| s == "run" || s == "grid") else {
        bail!("--config applies to the run and grid commands");
    };
    let sub_name = strings[sub_pos].clone();
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let pairs = parse_kv(&text)?;

    let cmd = Cli::command();
    let sub = cmd.find_subcommand(&sub_name).expect("subcommand exists");
    let known_anywhere = |key: &str| {
        cmd.get_subcommands()
            .flat_map(|s| s.get_arguments())
            .any(|a| a.get_long() == Some(key))
    };
    let given: Vec<&str> = strings
        .iter()
        .filter_map(|s| s.strip_prefix("--"))
        .map(|s| s.split('=').next().unwrap_or(s))
        .collect();

    let mut injected = Vec::new();
    for (key, value) in pairs {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            if known_anywhere(&key) {
                continue;
            }
            bail!("{}: unknown key `{key}`", path.display());
        };
        if given.contains(&key.as_str()) {
            continue;
        }
        if arg.get_action().takes_values() {
            if value.is_empty() {
                continue;
            }
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            let on: bool = value
                .parse()
                .with_context(|| format!("{}: `{key}` expects true or false", path.display()))?;
            if on {
                injected.push(OsString::from(format!("--{key}")));
            }
        }
    }
    let mut out: Vec<OsString> = rest[..sub_pos + 1].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[sub_pos + 1..]);
    Ok(out)
}

fn summarize(outcome: &Outcome, out: &std::path::Path) {
    let failed = outcome.table.rows.iter().filter(|r| !r.is_ok()).count();
    println!(
        "{} runs recorded ({} new, {} failed); see {} and {}",
        outcome.table.len(),
        outcome.executed,
        failed,
        out.join(RESULTS_CSV).display(),
        out.join(RESULTS_MD).display()
    );
}

/// Parses `args` (including the program name) and executes the command.
pub fn run_cli(args: Vec<OsString>) -> anyhow::Result<()> {
    let cli = Cli::try_parse_from(expand_config(args)?)?;
    match cli.command {
        Command::Run(a) => {
            let spec = a.common.spec(a.encoder, a.mode)?;
            let outcome = run_matrix(&spec)?;
            summarize(&outcome, &spec.out_dir);
        }
        Command::Grid(a) => {
            let mut spec = a.common.spec(vec![Family::Inception], a.mode)?;
            spec.grid = GridAxes {
                lrs: a.lrs,
                n_kernels: a.nkernels,
                kernel_sizes: a.ksizes,
            };
            let outcome = grid_search(&spec)?;
            summarize(&outcome, &spec.out_dir);
        }
        Command::Report(a) => {
            let path = a.input.join(RESULTS_CSV);
            let table = ResultsTable::load_csv(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut datasets: Vec<String> = table.rows.iter().map(|r| r.key.dataset.clone()).collect();
            datasets.sort();
            datasets.dedup();
            emit_reports(&table, &datasets, &a.input)?;
            let mut sorted = table;
            sorted.sort();
            print!("{}", sorted.to_markdown(&datasets));
        }
        Command::Synth(a) => {
            let mut task = match a.task {
                SynthTask::TwoClass => SineTask::two_class(a.length, a.noise),
                SynthTask::MultiScale => SineTask::multi_scale(a.length, a.noise),
            };
            if let Some(name) = a.name {
                task.name = name;
            }
            let (train, test) = task.generate(a.train, a.test, a.seed);
            let dir = a.out.join(&task.name);
            fs::create_dir_all(&dir)?;
            save_ucr_split(&train, &dir.join(format!("{}_TRAIN.tsv", task.name)))?;
            save_ucr_split(&test, &dir.join(format!("{}_TEST.tsv", task.name)))?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}
