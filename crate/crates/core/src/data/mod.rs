//! UCR-format datasets: loading, label remapping, z-normalization and
//! batching.

pub mod synthetic;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Series whose standard deviation falls below this become all zeros.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One labeled series. `values` is time-major: `values[t * d + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    pub values: Vec<f64>,
    pub label: usize,
}

/// Bijection between the sorted distinct original labels and `0..C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    originals: Vec<f64>,
}

impl LabelMap {
    pub fn from_labels(labels: impl IntoIterator<Item = f64>) -> Self {
        let mut originals: Vec<f64> = labels.into_iter().collect();
        originals.sort_by(f64::total_cmp);
        originals.dedup();
        LabelMap { originals }
    }

    pub fn index_of(&self, original: f64) -> Option<usize> {
        self.originals.binary_search_by(|probe| probe.total_cmp(&original)).ok()
    }

    pub fn original(&self, index: usize) -> Option<f64> {
        self.originals.get(index).copied()
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn originals(&self) -> &[f64] {
        &self.originals
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub samples: Vec<TimeSeriesSample>,
    pub num_classes: usize,
    pub series_length: usize,
    pub channels: usize,
    pub label_map: LabelMap,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.label)
    }

    /// Checks that two splits can be used together for training and testing.
    pub fn check_compatible(&self, other: &Dataset) -> Result<()> {
        if self.series_length != other.series_length
            || self.channels != other.channels
            || self.num_classes != other.num_classes
        {
            return Err(Error::DatasetMismatch(format!(
                "{} ({}): T={} d={} C={} vs {} ({}): T={} d={} C={}",
                self.name,
                self.split,
                self.series_length,
                self.channels,
                self.num_classes,
                other.name,
                other.split,
                other.series_length,
                other.channels,
                other.num_classes
            )));
        }
        Ok(())
    }
}

struct RawRow {
    line: usize,
    label: f64,
    values: Vec<f64>,
}

fn parse_number(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token.trim().parse().map_err(|_| Error::ParseNumber {
        path: path.to_path_buf(),
        line,
        token: token.to_string(),
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue {
            path: path.to_path_buf(),
            line,
        });
    }
    Ok(v)
}

fn read_rows(path: &Path) -> Result<Vec<RawRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut expected = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if line.contains('\t') {
            line.split('\t').collect()
        } else if line.contains(',') {
            line.split(',').collect()
        } else {
            line.split_whitespace().collect()
        };
        let label = parse_number(path, line_no, fields[0])?;
        let values = fields[1..]
            .iter()
            .map(|tok| {
                if tok.trim().is_empty() {
                    Err(Error::NonFiniteValue {
                        path: path.to_path_buf(),
                        line: line_no,
                    })
                } else {
                    parse_number(path, line_no, tok)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let expected = *expected.get_or_insert(values.len());
        if values.len() != expected || expected == 0 {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line: line_no,
                expected,
                found: values.len(),
            });
        }
        rows.push(RawRow {
            line: line_no,
            label,
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(rows)
}

fn dataset_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    stem.trim_end_matches("_TRAIN").trim_end_matches("_TEST").to_string()
}

fn split_of(path: &Path) -> Split {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
    if name.to_ascii_uppercase().contains("TEST") {
        Split::Test
    } else {
        Split::Train
    }
}

/// Loads one split, building the label map from this file's labels.
pub fn load_ucr_split(path: &Path) -> Result<Dataset> {
    let rows = read_rows(path)?;
    let map = LabelMap::from_labels(rows.iter().map(|r| r.label));
    build(path, rows, map)
}

/// Loads one split using a label map built from another split (normally the
/// training split). Labels absent from `map` are an error.
pub fn load_ucr_split_with(path: &Path, map: &LabelMap) -> Result<Dataset> {
    build(path, read_rows(path)?, map.clone())
}

fn build(path: &Path, rows: Vec<RawRow>, map: LabelMap) -> Result<Dataset> {
    let series_length = rows[0].values.len();
    let samples = rows
        .into_iter()
        .map(|r| {
            let label = map.index_of(r.label).ok_or_else(|| Error::UnseenLabel {
                path: path.to_path_buf(),
                line: r.line,
                label: r.label,
            })?;
            Ok(TimeSeriesSample {
                values: r.values,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: dataset_name(path),
        split: split_of(path),
        samples,
        num_classes: map.len(),
        series_length,
        channels: 1,
        label_map: map,
    })
}

fn find_split_file(dir: &Path, name: &str, split: &str) -> Option<PathBuf> {
    let stems = [dir.join(name), dir.to_path_buf()];
    let suffixes = ["tsv", "txt", "csv"];
    for base in &stems {
        let plain = base.join(format!("{name}_{split}"));
        for ext in suffixes {
            let p = plain.with_extension(ext);
            if p.is_file() {
                return Some(p);
            }
        }
        if plain.is_file() {
            return Some(plain);
        }
    }
    None
}

/// Loads `<name>_TRAIN` and `<name>_TEST` from `dir` or `dir/<name>`, with
/// any of the `.tsv`, `.txt`, `.csv` extensions or none. The test split
/// reuses the training label map.
pub fn load_ucr_pair(dir: &Path, name: &str) -> Result<(Dataset, Dataset)> {
    let missing = |split: &str| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {name}_{split} file under {}", dir.display()),
        ))
    };
    let train_path = find_split_file(dir, name, "TRAIN").ok_or_else(|| missing("TRAIN"))?;
    let test_path = find_split_file(dir, name, "TEST").ok_or_else(|| missing("TEST"))?;
    let mut train = load_ucr_split(&train_path)?;
    let mut test = load_ucr_split_with(&test_path, &train.label_map)?;
    train.name = name.to_string();
    test.name = name.to_string();
    train.check_compatible(&test)?;
    Ok((train, test))
}

/// Writes a split in UCR tab-separated form with its original labels.
pub fn save_ucr_split(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in &ds.samples {
        let label = ds.label_map.original(s.label).expect("label in map");
        write!(out, "{label}")?;
        for v in &s.values {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-series, per-channel transform to zero mean and unit population
/// standard deviation.
pub fn znormalize(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    let d = ds.channels;
    let t = ds.series_length as f64;
    for s in &mut out.samples {
        for c in 0..d {
            let mean = s.values.iter().skip(c).step_by(d).sum::<f64>() / t;
            let var = s
                .values
                .iter()
                .skip(c)
                .step_by(d)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / t;
            let std = var.sqrt();
            for v in s.values.iter_mut().skip(c).step_by(d) {
                *v = if std < MIN_STD { 0.0 } else { (*v - mean) / std };
            }
        }
    }
    out
}

/// A mini-batch: `values` is `[B, T, d]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch over a dataset in fixed-size batches; the last may be smaller.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Shuffling is a Fisher-Yates permutation from a ChaCha8 stream seeded
/// with `seed`.
pub fn batch_iter(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<BatchIterator<'_>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIterator {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'a> BatchIterator<'a> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut values = Vec::with_capacity(indices.len() * self.ds.series_length * self.ds.channels);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            values.extend_from_slice(&self.ds.samples[i].values);
            labels.push(self.ds.samples[i].label);
        }
        Some(Batch {
            values,
            labels,
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, name: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn remaps_sorted_distinct_labels() {
        let (_d, p) = write_tmp("2\t0.5\t-0.5\n5\t1.0\t2.0\n", "X_TRAIN.tsv");
        let ds = load_ucr_split(&p).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.series_length, 2);
        assert_eq!(ds.samples[0].label, 0);
        assert_eq!(ds.samples[1].label, 1);
        assert_eq!(ds.label_map.original(0), Some(2.0));
        assert_eq!(ds.label_map.original(1), Some(5.0));
        assert_eq!(ds.name, "X");
        assert_eq!(ds.split, Split::Train);
    }

    #[test]
    fn binary_minus_one_plus_one() {
        let (_d, p) = write_tmp("1,0.1,0.2\n-1,0.3,0.4\n1,0,0\n", "B_TEST.txt");
        let ds = load_ucr_split(&p).unwrap();
        assert_eq!(ds.label_map.index_of(-1.0), Some(0));
        assert_eq!(ds.label_map.index_of(1.0), Some(1));
        assert_eq!(ds.split, Split::Test);
    }

    #[test]
    fn ragged_rows_report_line() {
        let (_d, p) = write_tmp("1\t1\t2\t3\n2\t1\t2\n", "R_TRAIN.tsv");
        match load_ucr_split(&p) {
            Err(Error::RaggedRow {
                line, expected, found, ..
            }) => assert_eq!((line, expected, found), (2, 3, 2)),
            other => panic!("expected ragged row error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_garbage_files() {
        let (_d, p) = write_tmp("\n\n", "E_TRAIN.tsv");
        assert!(matches!(load_ucr_split(&p), Err(Error::EmptyFile { .. })));
        let (_d, p) = write_tmp("1\t0.5\tabc\n", "G_TRAIN.tsv");
        assert!(matches!(load_ucr_split(&p), Err(Error::ParseNumber { line: 1, .. })));
        let (_d, p) = write_tmp("1\t0.5\tNaN\n", "N_TRAIN.tsv");
        assert!(matches!(load_ucr_split(&p), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn unseen_test_label() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("U_TRAIN.tsv"), "1\t0\t1\n2\t1\t0\n").unwrap();
        fs::write(dir.path().join("U_TEST.tsv"), "3\t0\t1\n").unwrap();
        assert!(matches!(
            load_ucr_pair(dir.path(), "U"),
            Err(Error::UnseenLabel { label, .. }) if label == 3.0
        ));
    }

    #[test]
    fn znormalize_known_values() {
        let ds = Dataset {
            name: "z".into(),
            split: Split::Train,
            samples: vec![
                TimeSeriesSample {
                    values: vec![1.0, 2.0, 3.0],
                    label: 0,
                },
                TimeSeriesSample {
                    values: vec![5.0, 5.0, 5.0],
                    label: 0,
                },
            ],
            num_classes: 1,
            series_length: 3,
            channels: 1,
            label_map: LabelMap::from_labels([0.0]),
        };
        let z = znormalize(&ds);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.samples[0].values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(z.samples[1].values, vec![0.0; 3]);
    }

    fn ten_samples() -> Dataset {
        Dataset {
            name: "ten".into(),
            split: Split::Train,
            samples: (0..10)
                .map(|i| TimeSeriesSample {
                    values: vec![i as f64, 0.0],
                    label: i % 3,
                })
                .collect(),
            num_classes: 3,
            series_length: 2,
            channels: 1,
            label_map: LabelMap::from_labels([0.0, 1.0, 2.0]),
        }
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = ten_samples();
        let sizes: Vec<usize> = batch_iter(&ds, 3, false, 0).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let order: Vec<usize> = batch_iter(&ds, 4, false, 0).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_shuffle() {
        let ds = ten_samples();
        let a = batch_iter(&ds, 3, true, 7).unwrap().order().to_vec();
        let b = batch_iter(&ds, 3, true, 7).unwrap().order().to_vec();
        assert_eq!(a, b);
        let distinct = (0..20u64)
            .map(|s| batch_iter(&ds, 3, true, s).unwrap().order().to_vec())
            .collect::<std::collections::HashSet<_>>();
        assert!(distinct.len() > 15, "only {} distinct permutations", distinct.len());
    }

    #[test]
    fn empty_dataset_and_zero_batch() {
        let mut ds = ten_samples();
        assert!(batch_iter(&ds, 0, false, 0).is_err());
        ds.samples.clear();
        assert!(matches!(batch_iter(&ds, 3, false, 0), Err(Error::EmptyDataset)));
    }
}
