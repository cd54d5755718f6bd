//! Subcommand implementations.

pub mod crossval;
pub mod distribution;
pub mod evaluate_cmd;
pub mod export;
pub mod extract;
pub mod gen_synthetic;
pub mod train_cmd;

use std::path::Path;

use era_forge::data::{load_manifest, match_bios, read_bioe, Dataset};
use era_forge::dsp::DspConfig;
use era_forge::metrics::{Granularity, LabelSpace};

use crate::{CliError, CliResult};

/// Worker-count cap from the environment.
pub fn env_thread_cap() -> Option<usize> {
    std::env::var("ERA_FORGE_THREADS").ok().and_then(|v| v.parse().ok())
}

pub fn require_exists(path: &Path, what: &str) -> CliResult {
    if !path.exists() {
        return Err(CliError::Usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

/// Load a manifest plus (optionally) biographies, match artists, and read
/// all feature files into memory.
pub fn load_dataset(
    manifest: &Path,
    bios: Option<&Path>,
    dsp: &DspConfig,
) -> Result<Dataset, CliError> {
    let records = load_manifest(manifest)?;
    let mut ds = Dataset::new(records);
    if let Some(bios_path) = bios {
        let table = read_bioe(bios_path)?;
        let matched = match_bios(&mut ds.records, &table);
        log::info!("matched {matched}/{} tracks to biographies", ds.len());
        ds.bios = Some(table);
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    ds.load_features(base, dsp)?;
    Ok(ds)
}

/// Tracks whose year fits the label space; out-of-span tracks are dropped
/// with a warning (they are data issues, not errors).
pub fn in_span_indices(ds: &Dataset, space: &LabelSpace) -> Vec<usize> {
    let mut kept = Vec::with_capacity(ds.len());
    let mut dropped = 0usize;
    for (i, r) in ds.records.iter().enumerate() {
        if space.year_to_class(r.year).is_ok() {
            kept.push(i);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} tracks outside the {}..={} span",
            space.base_year,
            space.last_year()
        );
    }
    kept
}

pub fn label_space(granularity: Granularity, base_year: Option<i32>, classes: Option<usize>) -> LabelSpace {
    let mut space = LabelSpace::default_for(granularity);
    if let Some(b) = base_year {
        space.base_year = b;
    }
    if let Some(c) = classes {
        space.n_classes = c;
    }
    space
}

pub fn parse_span(span: &str) -> Result<(i32, i32), CliError> {
    let parts: Vec<&str> = span.split(':').collect();
    let err = || CliError::Usage(format!("invalid span {span:?}; expected Y0:Y1 like 1947:2010"));
    if parts.len() != 2 {
        return Err(err());
    }
    let lo: i32 = parts[0].parse().map_err(|_| err())?;
    let hi: i32 = parts[1].parse().map_err(|_| err())?;
    if lo >= hi {
        return Err(err());
    }
    Ok((lo, hi))
}

pub fn parse_channels(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("invalid channel list {text:?}")))
        })
        .collect()
}
