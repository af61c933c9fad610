use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{GridPoint, Mode, RunKey};
use crate::encoders::Family;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 12] = [
    "dataset",
    "family",
    "mode",
    "lr",
    "n_kernels",
    "k",
    "seed",
    "max_test_acc",
    "min_loss_acc",
    "epochs",
    "wall_s",
    "status",
];

pub const STATUS_OK: &str = "ok";

/// Rounds to 6 significant digits and prints the shortest decimal that
/// parses back to the rounded value.
pub fn fmt6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// `x` as it reads back from the CSV.
pub fn round6(x: f64) -> f64 {
    fmt6(x).parse().unwrap_or(x)
}

/// One training run, or the error that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub key: RunKey,
    pub seed: u64,
    pub max_test_acc: Option<f64>,
    pub min_loss_acc: Option<f64>,
    pub epochs: usize,
    pub wall_s: f64,
    /// `ok`, or `error: <message>`.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    /// The row with every float at CSV precision.
    pub fn rounded(&self) -> ResultRow {
        let mut r = self.clone();
        r.key.lr = round6(r.key.lr);
        r.max_test_acc = r.max_test_acc.map(round6);
        r.min_loss_acc = r.min_loss_acc.map(round6);
        r.wall_s = round6(r.wall_s);
        r
    }

    fn record(&self) -> [String; 12] {
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let optf = |v: Option<f64>| v.map(fmt6).unwrap_or_default();
        [
            self.key.dataset.clone(),
            self.key.family.to_string(),
            self.key.mode.to_string(),
            fmt6(self.key.lr),
            opt(self.key.n_kernels),
            opt(self.key.kernel_size),
            self.seed.to_string(),
            optf(self.max_test_acc),
            optf(self.min_loss_acc),
            self.epochs.to_string(),
            fmt6(self.wall_s),
            self.status.clone(),
        ]
    }

    fn parse(rec: &csv::StringRecord, line: u64) -> Result<ResultRow> {
        let bad = |field: &str, v: &str| Error::Results(format!("line {line}: bad {field} {v:?}"));
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Results(format!(
                "line {line}: expected {} fields, found {}",
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(CSV_HEADER[i], &rec[i])) };
        let int = |i: usize| -> Result<u64> { rec[i].parse().map_err(|_| bad(CSV_HEADER[i], &rec[i])) };
        let opt_int = |i: usize| -> Result<Option<usize>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                int(i).map(|v| Some(v as usize))
            }
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        Ok(ResultRow {
            key: RunKey {
                dataset: rec[0].to_string(),
                family: rec[1].parse().map_err(|_| bad("family", &rec[1]))?,
                mode: rec[2].parse().map_err(|_| bad("mode", &rec[2]))?,
                lr: num(3)?,
                n_kernels: opt_int(4)?,
                kernel_size: opt_int(5)?,
            },
            seed: int(6)?,
            max_test_acc: opt_num(7)?,
            min_loss_acc: opt_num(8)?,
            epochs: int(9)? as usize,
            wall_s: num(10)?,
            status: rec[11].to_string(),
        })
    }
}

/// Mean of the successful rows sharing everything but the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub family: Family,
    pub mode: Mode,
    pub lr: f64,
    pub n_kernels: Option<usize>,
    pub kernel_size: Option<usize>,
    pub datasets: usize,
    pub max_test_acc: f64,
    pub min_loss_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Appends rows to a CSV file as they arrive, writing the header first
/// when the file is new.
pub struct CsvAppender {
    writer: csv::Writer<fs::File>,
}

impl CsvAppender {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(CSV_HEADER).map_err(csv_err)?;
            writer.flush()?;
        }
        Ok(CsvAppender { writer })
    }

    pub fn append(&mut self, row: &ResultRow) -> Result<()> {
        self.writer.write_record(row.record()).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Results(e.to_string())
}

impl ResultsTable {
    pub fn new(rows: Vec<ResultRow>) -> Self {
        ResultsTable { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, key: &RunKey) -> bool {
        self.rows.iter().any(|r| &r.key == key)
    }

    /// Enumeration order: dataset, family, mode, then lr (descending),
    /// kernel count and kernel size.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.key.cmp_order(&b.key));
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(CSV_HEADER).map_err(csv_err)?;
        for row in &self.rows {
            writer.write_record(row.record()).map_err(csv_err)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Results(format!(
                "unexpected header {:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            rows.push(ResultRow::parse(&rec, i as u64 + 2)?);
        }
        Ok(ResultsTable { rows })
    }

    /// Replaces `path` with the table, through a temporary file.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("csv.tmp");
        self.write_csv(fs::File::create(&tmp)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?)
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        type Group = (Family, Mode, u64, Option<usize>, Option<usize>);
        let mut groups: BTreeMap<Group, (f64, Vec<&ResultRow>)> = BTreeMap::new();
        for row in self.rows.iter().filter(|r| r.is_ok()) {
            let k = &row.key;
            let group = (k.family, k.mode, (-k.lr).to_bits(), k.n_kernels, k.kernel_size);
            groups.entry(group).or_insert((k.lr, Vec::new())).1.push(row);
        }
        let mut out: Vec<Aggregate> = groups
            .into_iter()
            .map(|((family, mode, _, n_kernels, kernel_size), (lr, rows))| {
                let n = rows.len() as f64;
                let mean = |f: fn(&ResultRow) -> Option<f64>| rows.iter().filter_map(|r| f(r)).sum::<f64>() / n;
                Aggregate {
                    family,
                    mode,
                    lr,
                    n_kernels,
                    kernel_size,
                    datasets: rows.len(),
                    max_test_acc: mean(|r| r.max_test_acc),
                    min_loss_acc: mean(|r| r.min_loss_acc),
                }
            })
            .collect();
        out.sort_by(|a, b| {
            (a.family, a.mode, a.n_kernels, a.kernel_size)
                .cmp(&(b.family, b.mode, b.n_kernels, b.kernel_size))
                .then(b.lr.total_cmp(&a.lr))
        });
        out
    }

    /// Mean max test accuracy per grid point over the inception rows of
    /// `mode`, in grid order.
    pub fn grid_summary(&self, mode: Mode) -> Vec<(GridPoint, usize, f64)> {
        let mut out: Vec<(GridPoint, usize, f64)> = self
            .aggregates()
            .into_iter()
            .filter(|a| a.family == Family::Inception && a.mode == mode)
            .filter_map(|a| {
                let point = GridPoint {
                    lr: a.lr,
                    n_kernels: a.n_kernels?,
                    kernel_size: a.kernel_size?,
                };
                Some((point, a.datasets, a.max_test_acc))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp_order(&b.0));
        out
    }

    /// Per-run table (one line per CSV row) followed by the averaged
    /// summaries.
    pub fn to_markdown(&self, datasets: &[String]) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Results\n");
        let _ = writeln!(md, "Datasets: {}\n", datasets.join(", "));
        let _ = writeln!(md, "## Runs\n");
        let _ = writeln!(
            md,
            "| Dataset | Model | Mode | LR | N_kernels | K | Seed | Max Test Acc. | Min Loss Acc. | Epochs | Wall (s) | Status |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|---|---|---|");
        for row in &self.rows {
            let _ = writeln!(md, "| {} |", row.record().join(" | "));
        }
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());

        let aggregates = self.aggregates();
        let _ = writeln!(md, "\n## Mean over datasets (%)\n");
        let _ = writeln!(
            md,
            "| Model | LR | N_kernels | K | Max Test Acc. Plain | Max Test Acc. + Backbone | Min Loss Acc. Plain | Min Loss Acc. + Backbone |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        // family, lr sort key, N, K, lr
        type Setting = (Family, u64, Option<usize>, Option<usize>, f64);
        let mut settings: Vec<Setting> = aggregates
            .iter()
            .map(|a| (a.family, (-a.lr).to_bits(), a.n_kernels, a.kernel_size, a.lr))
            .collect();
        settings.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3);
        settings.sort_by(|a, b| (a.0, a.2, a.3).cmp(&(b.0, b.2, b.3)).then(b.4.total_cmp(&a.4)));
        settings.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3);
        for (family, _, n, k, lr) in settings {
            let find = |mode: Mode| {
                aggregates.iter().find(|a| {
                    a.family == family && a.mode == mode && a.n_kernels == n && a.kernel_size == k && a.lr == lr
                })
            };
            let (plain, hybrid) = (find(Mode::Plain), find(Mode::Hybrid));
            let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                md,
                "| {family} | {} | {} | {} | {} | {} | {} | {} |",
                fmt6(lr),
                opt(n),
                opt(k),
                pct(plain.map(|a| a.max_test_acc)),
                pct(hybrid.map(|a| a.max_test_acc)),
                pct(plain.map(|a| a.min_loss_acc)),
                pct(hybrid.map(|a| a.min_loss_acc)),
            );
        }

        for mode in [Mode::Plain, Mode::Hybrid] {
            let grid = self.grid_summary(mode);
            if grid.len() < 2 {
                continue;
            }
            let _ = writeln!(md, "\n## Inception grid, {mode} mode\n");
            let _ = writeln!(md, "| Learning Rate | N_kernels | K | Avg. Max Acc. |");
            let _ = writeln!(md, "|---|---|---|---|");
            for (p, _, acc) in grid {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {:.4} |",
                    fmt6(p.lr),
                    p.n_kernels,
                    p.kernel_size,
                    acc
                );
            }
        }
        md
    }
}
