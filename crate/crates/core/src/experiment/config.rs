//! `key = value` experiment files. Keys are the long command line flags
//! without the leading dashes; `_` and `-` are interchangeable.

use std::fmt::Write as _;

use super::{fmt6, ExperimentSpec};
use crate::error::{Error, Result};

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parses the lines of a config file. Blank lines and text after `#` are
/// ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config("config", format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        let key = key.trim().to_ascii_lowercase().replace('_', "-");
        if key.is_empty() {
            return Err(Error::config("config", format!("line {}: empty key", i + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

pub(super) fn spec_to_text(spec: &ExperimentSpec) -> String {
    let e = &spec.encoder;
    let b = &spec.backbone;
    let mut families: Vec<&str> = spec.families.iter().map(|f| f.name()).collect();
    families.dedup();
    let mut pairs: Vec<(&str, String)> = vec![
        ("data-dir", spec.data_dir.display().to_string()),
        ("datasets", spec.datasets.join(",")),
        ("encoder", families.join(",")),
        ("mode", join(&spec.modes)),
        ("lr", fmt6(spec.train.lr)),
        ("epochs", spec.train.epochs.to_string()),
        ("batch-size", spec.train.batch_size.to_string()),
        ("seed", spec.train.seed.to_string()),
        ("precision", spec.train.precision.to_string()),
        ("out", spec.out_dir.display().to_string()),
        ("workers", spec.workers.to_string()),
        ("no-znorm", (!spec.znormalize).to_string()),
        ("curves", spec.save_curves.to_string()),
        ("hidden", e.hidden.to_string()),
        ("mlp-widths", join(&e.mlp.widths)),
        ("conv-channels", join(&e.conv.channels)),
        ("conv-kernels", join(&e.conv.kernels)),
        ("n-kernels", e.inception.n_kernels.to_string()),
        ("kernel-size", e.inception.kernel_size.to_string()),
        ("depth", e.inception.depth.to_string()),
        ("bottleneck", e.inception.bottleneck.to_string()),
        ("branch-filters", e.inception.branch_filters.to_string()),
        ("tf-layers", e.transformer.layers.to_string()),
        ("tf-heads", e.transformer.heads.to_string()),
        ("patch-len", e.transformer.patch_len.to_string()),
        ("bb-layers", b.layers.to_string()),
        ("bb-heads", b.heads.to_string()),
        ("bb-ff", b.ff_width.to_string()),
        ("max-context", b.max_context.to_string()),
        ("prompt-len", b.prompt_len.to_string()),
        ("bb-seed", b.seed.to_string()),
        (
            "lrs",
            spec.grid.lrs.iter().map(|&v| fmt6(v)).collect::<Vec<_>>().join(","),
        ),
        ("nkernels", join(&spec.grid.n_kernels)),
        ("ksizes", join(&spec.grid.kernel_sizes)),
    ];
    if let Some(path) = &spec.backbone_weights {
        pairs.push(("bb-weights", path.display().to_string()));
    }
    let mut text = String::new();
    for (k, v) in pairs {
        let _ = writeln!(text, "{k} = {v}");
    }
    text
}
