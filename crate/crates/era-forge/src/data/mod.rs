//! Dataset manifests, biography embeddings, batch assembly, and the
//! synthetic desk-scale dataset generator.

mod batch;
mod bio;
mod synthetic;

pub use batch::{assemble_batch, epoch_batches, make_batch, AssembledBatch, BatchConfig};
pub use bio::{
    match_bios, normalize_name, read_bioe, read_keyed_vectors, write_bioe, write_keyed_vectors,
    BioEmbeddingTable,
};
pub use synthetic::{generate_synthetic, write_synthetic_dataset, SyntheticSpec};

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{read_mels, DspConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::metrics::LabelSpace;

/// One song: audio or cached-feature reference, release year, artist, and an
/// optional pointer into the biography embedding table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrackRecord {
    pub track_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audio_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_path: Option<PathBuf>,
    pub year: i32,
    pub artist_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bio_embedding_ref: Option<usize>,
}

/// Raw manifest line before validation; `year` may be absent, which skips
/// the record instead of failing the file.
#[derive(Debug, Deserialize)]
struct RawRecord {
    track_id: Option<String>,
    #[serde(default)]
    audio_path: Option<PathBuf>,
    #[serde(default)]
    feature_path: Option<PathBuf>,
    #[serde(default)]
    year: Option<i32>,
    #[serde(default)]
    artist_id: Option<String>,
    #[serde(default)]
    bio_embedding_ref: Option<usize>,
}

/// Load a JSONL manifest. Malformed lines and field violations are hard
/// errors naming the line; records without a year are skipped with a
/// warning; duplicate track ids are rejected.
pub fn load_manifest(path: &Path) -> Result<Vec<TrackRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut skipped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            detail: e.to_string(),
        })?;
        let track_id = raw
            .track_id
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::Manifest { line: line_no, detail: "missing track_id".into() })?;
        let artist_id = raw
            .artist_id
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Manifest { line: line_no, detail: "missing artist_id".into() })?;
        match (&raw.audio_path, &raw.feature_path) {
            (None, None) => {
                return Err(Error::Manifest {
                    line: line_no,
                    detail: "need one of audio_path or feature_path".into(),
                })
            }
            (Some(_), Some(_)) => {
                return Err(Error::Manifest {
                    line: line_no,
                    detail: "audio_path and feature_path are mutually exclusive".into(),
                })
            }
            _ => {}
        }
        let Some(year) = raw.year else {
            log::warn!("manifest line {line_no}: no year, skipping {track_id}");
            skipped += 1;
            continue;
        };
        if !seen.insert(track_id.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                detail: format!("duplicate track_id {track_id}"),
            });
        }
        records.push(TrackRecord {
            track_id,
            audio_path: raw.audio_path,
            feature_path: raw.feature_path,
            year,
            artist_id,
            bio_embedding_ref: raw.bio_embedding_ref,
        });
    }
    if skipped > 0 {
        log::warn!("manifest {}: skipped {skipped} records without a year", path.display());
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// A manifest plus (optionally) in-memory features and the biography table.
/// Fold plans and training loops address tracks by index into `records`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<TrackRecord>,
    /// Aligned with `records` once loaded; `None` until `load_features`.
    pub features: Vec<Option<MelSpectrogram>>,
    pub bios: Option<BioEmbeddingTable>,
}

impl Dataset {
    pub fn new(records: Vec<TrackRecord>) -> Self {
        let features = vec![None; records.len()];
        Dataset { records, features, bios: None }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Read every record's feature file into memory. `base` resolves
    /// relative feature paths (usually the manifest's directory).
    pub fn load_features(&mut self, base: &Path, cfg: &DspConfig) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            if self.features[i].is_some() {
                continue;
            }
            let rel = rec.feature_path.as_ref().ok_or_else(|| {
                Error::Config(format!("track {} has no feature_path; extract features first", rec.track_id))
            })?;
            let path = if rel.is_absolute() { rel.clone() } else { base.join(rel) };
            self.features[i] = Some(read_mels(&path, cfg)?);
        }
        Ok(())
    }

    pub fn feature(&self, idx: usize) -> Result<&MelSpectrogram> {
        self.features
            .get(idx)
            .and_then(|f| f.as_ref())
            .ok_or_else(|| Error::Config(format!("features not loaded for track index {idx}")))
    }

    /// Class index per record under `space`.
    pub fn class_labels(&self, space: &LabelSpace) -> Result<Vec<usize>> {
        self.records.iter().map(|r| space.year_to_class(r.year)).collect()
    }

    /// Biography vector for a record, through its artist's table row.
    pub fn bio_vector(&self, idx: usize) -> Option<&[f64]> {
        let bios = self.bios.as_ref()?;
        let r = &self.records[idx];
        match r.bio_embedding_ref {
            Some(row) => bios.vector_by_row(row),
            None => None,
        }
    }
}
