//! Batch assembly: stratified sampling, excerpt drawing, and the per-batch
//! P/N and text-shuffle index sets.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::dsp::{sample_excerpt_or_pad, sample_excerpt_with};
use crate::error::{Error, Result};
use crate::losses::{build_pos_neg, text_shuffle, PosNegSets, ViewAssignments};
use crate::metrics::LabelSpace;
use crate::nncore::Tensor;

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Target tracks per sampled class under stratified sampling.
    pub per_class: usize,
    pub excerpt_frames: usize,
    /// MMC negatives per anchor (clamped to availability).
    pub k_negatives: usize,
    /// Plain uniform sampling instead of class-stratified.
    pub uniform: bool,
    /// Permit batches whose pool has one class (audio-only baseline training).
    pub allow_single_class: bool,
    /// Zero-pad features shorter than the excerpt instead of failing.
    pub pad_short: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 64,
            per_class: 2,
            excerpt_frames: 1024,
            k_negatives: 7,
            uniform: false,
            allow_single_class: false,
            pad_short: false,
        }
    }
}

/// A ready-to-train batch: stacked excerpts, labels, and index sets.
#[derive(Debug, Clone)]
pub struct AssembledBatch {
    /// `[B, 1, n_mels, excerpt_frames]`
    pub inputs: Tensor,
    /// era class per row
    pub labels: Vec<usize>,
    /// dataset index per row
    pub dataset_indices: Vec<usize>,
    /// within-batch artist code per row
    pub artist_codes: Vec<usize>,
    pub sets: PosNegSets,
    /// MMC negatives per row (batch-local indices); empty where unusable
    pub views: ViewAssignments,
}

/// Draw one batch from `pool` (dataset indices). Stratified mode samples
/// classes then tracks so most anchors see both positives and negatives.
pub fn make_batch(
    ds: &Dataset,
    pool: &[usize],
    space: &LabelSpace,
    cfg: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AssembledBatch> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    if pool.len() < 2 {
        return Err(Error::Config(format!("pool of {} tracks cannot fill a batch", pool.len())));
    }
    let labels = pool_labels(ds, pool, space)?;
    let chosen = if cfg.uniform {
        let mut p: Vec<usize> = (0..pool.len()).collect();
        p.shuffle(rng);
        p.truncate(cfg.batch_size.min(pool.len()));
        p
    } else {
        stratified_pick(&labels, cfg.batch_size, cfg.per_class, rng)
    };
    let classes: std::collections::HashSet<usize> = chosen.iter().map(|&p| labels[p]).collect();
    if classes.len() < 2 && !cfg.allow_single_class {
        return Err(Error::SingleClassBatch);
    }
    let indices: Vec<usize> = chosen.iter().map(|&p| pool[p]).collect();
    assemble_batch(ds, &indices, space, cfg, rng)
}

/// Partition `pool` positions into one epoch of batches, each track exactly
/// once. Stratified mode groups same-class runs of `per_class` so P(i) is
/// nonempty for most anchors.
pub fn epoch_batches(
    labels: &[usize],
    batch_size: usize,
    per_class: usize,
    uniform: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    if uniform {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        return order.chunks(batch_size).map(|c| c.to_vec()).collect();
    }
    // group positions by class, shuffle within, chop into per_class runs
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(pos);
    }
    let mut class_ids: Vec<usize> = by_class.keys().cloned().collect();
    class_ids.sort_unstable();
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for class in class_ids {
        let group = by_class.get_mut(&class).expect("grouped");
        group.shuffle(rng);
        for chunk in group.chunks(per_class.max(1)) {
            runs.push(chunk.to_vec());
        }
    }
    runs.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::with_capacity(batch_size);
    for run in runs {
        for pos in run {
            cur.push(pos);
            if cur.len() == batch_size {
                batches.push(std::mem::take(&mut cur));
            }
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Build the tensor batch for explicit dataset indices.
pub fn assemble_batch(
    ds: &Dataset,
    indices: &[usize],
    space: &LabelSpace,
    cfg: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AssembledBatch> {
    let b = indices.len();
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let n_mels = ds.feature(indices[0])?.n_mels;
    let mut inputs = Tensor::zeros(&[b, 1, n_mels, cfg.excerpt_frames]);
    let mut labels = Vec::with_capacity(b);
    let mut artist_codes = Vec::with_capacity(b);
    let mut artist_intern: HashMap<&str, usize> = HashMap::new();
    let plane = n_mels * cfg.excerpt_frames;
    for (row, &idx) in indices.iter().enumerate() {
        let rec = &ds.records[idx];
        labels.push(space.year_to_class(rec.year)?);
        let code = {
            let next = artist_intern.len();
            *artist_intern.entry(rec.artist_id.as_str()).or_insert(next)
        };
        artist_codes.push(code);
        let m = ds.feature(idx)?;
        if m.n_mels != n_mels {
            return Err(Error::shape(
                "assemble",
                format!("track {} has {} mel bands, batch expects {n_mels}", rec.track_id, m.n_mels),
            ));
        }
        let excerpt = if cfg.pad_short {
            sample_excerpt_or_pad(m, cfg.excerpt_frames, rng)?
        } else {
            sample_excerpt_with(m, cfg.excerpt_frames, rng)?
        };
        inputs.values_mut()[row * plane..(row + 1) * plane].copy_from_slice(&excerpt.values);
    }
    let sets = build_pos_neg(&labels);
    let shuffle_seed = rng.gen::<u64>();
    let views = text_shuffle(&labels, &artist_codes, cfg.k_negatives, shuffle_seed)?;
    Ok(AssembledBatch {
        inputs,
        labels,
        dataset_indices: indices.to_vec(),
        artist_codes,
        sets,
        views,
    })
}

fn pool_labels(ds: &Dataset, pool: &[usize], space: &LabelSpace) -> Result<Vec<usize>> {
    pool.iter().map(|&i| space.year_to_class(ds.records[i].year)).collect()
}

fn stratified_pick(
    labels: &[usize],
    batch_size: usize,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(pos);
    }
    let mut class_ids: Vec<usize> = by_class.keys().cloned().collect();
    for group in by_class.values_mut() {
        group.shuffle(rng);
    }
    class_ids.shuffle(rng);
    let per_class = per_class.max(1);
    let target = batch_size.min(labels.len());
    let mut cursors: BTreeMap<usize, usize> = BTreeMap::new();
    let mut chosen = Vec::with_capacity(target);
    // sweep the shuffled class order, taking per_class fresh tracks per
    // visit, until the batch is full or the pool runs dry
    while chosen.len() < target {
        let mut progressed = false;
        for &class in &class_ids {
            let group = &by_class[&class];
            let cur = cursors.entry(class).or_insert(0);
            let take = per_class.min(group.len() - *cur).min(target - chosen.len());
            if take > 0 {
                chosen.extend_from_slice(&group[*cur..*cur + take]);
                *cur += take;
                progressed = true;
            }
            if chosen.len() == target {
                break;
            }
        }
        if !progressed {
            break;
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrackRecord;
    use crate::dsp::MelSpectrogram;
    use crate::metrics::Granularity;
    use rand::SeedableRng;

    fn tiny_dataset(years: &[i32], artists: &[&str]) -> Dataset {
        let records: Vec<TrackRecord> = years
            .iter()
            .zip(artists)
            .enumerate()
            .map(|(i, (&year, artist))| TrackRecord {
                track_id: format!("t{i}"),
                audio_path: None,
                feature_path: Some(format!("t{i}.mels").into()),
                year,
                artist_id: artist.to_string(),
                bio_embedding_ref: None,
            })
            .collect();
        let features = (0..records.len())
            .map(|i| {
                Some(MelSpectrogram {
                    values: vec![i as f64; 4 * 8],
                    n_mels: 4,
                    n_frames: 8,
                    win: 2048,
                    hop: 512,
                    sample_rate: 22050,
                })
            })
            .collect();
        Dataset { records, features, bios: None }
    }

    fn space() -> LabelSpace {
        LabelSpace { granularity: Granularity::Year, base_year: 1947, n_classes: 64 }
    }

    #[test]
    fn four_track_batch_has_expected_sets() {
        let ds = tiny_dataset(&[1950, 1950, 1960, 1960], &["a", "b", "c", "d"]);
        let cfg = BatchConfig {
            batch_size: 4,
            per_class: 2,
            excerpt_frames: 4,
            k_negatives: 1,
            ..BatchConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = make_batch(&ds, &[0, 1, 2, 3], &space(), &cfg, &mut rng).unwrap();
        assert_eq!(batch.labels.len(), 4);
        // two classes with two tracks each: every anchor has 1 positive, 2 negatives
        for i in 0..4 {
            assert_eq!(batch.sets.positives[i].len(), 1, "anchor {i}");
            assert_eq!(batch.sets.negatives[i].len(), 2, "anchor {i}");
        }
        assert_eq!(batch.inputs.shape(), &[4, 1, 4, 4]);
    }

    #[test]
    fn fixed_seed_reproduces_batch_composition() {
        let years: Vec<i32> = (0..40).map(|i| 1950 + (i % 8)).collect();
        let artists: Vec<String> = (0..40).map(|i| format!("a{}", i % 10)).collect();
        let artist_refs: Vec<&str> = artists.iter().map(|s| s.as_str()).collect();
        let ds = tiny_dataset(&years, &artist_refs);
        let pool: Vec<usize> = (0..40).collect();
        let cfg = BatchConfig {
            batch_size: 8,
            excerpt_frames: 8,
            ..BatchConfig::default()
        };
        let a = make_batch(&ds, &pool, &space(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_batch(&ds, &pool, &space(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.dataset_indices, b.dataset_indices);
        assert_eq!(a.views, b.views);
        assert_eq!(a.inputs.values(), b.inputs.values());
    }

    #[test]
    fn single_class_pool_errors_unless_allowed() {
        let ds = tiny_dataset(&[1950, 1950, 1950], &["a", "b", "c"]);
        let cfg = BatchConfig { batch_size: 2, excerpt_frames: 4, ..BatchConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            make_batch(&ds, &[0, 1, 2], &space(), &cfg, &mut rng),
            Err(Error::SingleClassBatch)
        ));
        let cfg = BatchConfig { allow_single_class: true, ..cfg };
        assert!(make_batch(&ds, &[0, 1, 2], &space(), &cfg, &mut rng).is_ok());
    }

    #[test]
    fn batch_invariants_cover_all_rows() {
        let years: Vec<i32> = (0..30).map(|i| 1950 + (i % 5)).collect();
        let artists: Vec<String> = (0..30).map(|i| format!("a{}", i % 6)).collect();
        let artist_refs: Vec<&str> = artists.iter().map(|s| s.as_str()).collect();
        let ds = tiny_dataset(&years, &artist_refs);
        let pool: Vec<usize> = (0..30).collect();
        let cfg = BatchConfig { batch_size: 10, excerpt_frames: 8, ..BatchConfig::default() };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = make_batch(&ds, &pool, &space(), &cfg, &mut rng).unwrap();
            let b = batch.labels.len();
            for i in 0..b {
                assert!(!batch.sets.positives[i].contains(&i));
                assert!(!batch.sets.negatives[i].contains(&i));
                let mut union: Vec<usize> = batch.sets.positives[i]
                    .iter()
                    .chain(&batch.sets.negatives[i])
                    .cloned()
                    .collect();
                union.push(i);
                union.sort_unstable();
                let want: Vec<usize> = (0..b).collect();
                assert_eq!(union, want);
                // MMC negatives never share the anchor's artist
                for &k in &batch.views[i] {
                    assert_ne!(batch.artist_codes[k], batch.artist_codes[i]);
                    assert_eq!(batch.labels[k], batch.labels[i]);
                }
            }
        }
    }

    #[test]
    fn stratified_class_frequency_is_uniform_on_balanced_pool() {
        // balanced 8-class pool; over many batches every class should be
        // sampled equally often (within 2% relative)
        let years: Vec<i32> = (0..80).map(|i| 1950 + (i % 8)).collect();
        let artists: Vec<String> = (0..80).map(|i| format!("a{i}")).collect();
        let artist_refs: Vec<&str> = artists.iter().map(|s| s.as_str()).collect();
        let ds = tiny_dataset(&years, &artist_refs);
        let pool: Vec<usize> = (0..80).collect();
        let cfg = BatchConfig { batch_size: 8, excerpt_frames: 8, ..BatchConfig::default() };
        let space = space();
        let mut counts = vec![0usize; 64];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 10_000;
        for _ in 0..trials {
            let batch = make_batch(&ds, &pool, &space, &cfg, &mut rng).unwrap();
            for &l in &batch.labels {
                counts[l] += 1;
            }
        }
        let active: Vec<usize> = (3..11).map(|c| counts[c]).collect();
        let total: usize = active.iter().sum();
        assert_eq!(total, trials * 8);
        let expected = total as f64 / 8.0;
        for (i, &c) in active.iter().enumerate() {
            let rel = (c as f64 - expected).abs() / expected;
            assert!(rel < 0.02, "class {i}: {c} vs expected {expected} ({rel:.3})");
        }
    }

    #[test]
    fn epoch_batches_cover_every_position_once() {
        let labels: Vec<usize> = (0..103).map(|i| i % 7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batches = epoch_batches(&labels, 16, 2, false, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().cloned().collect();
        seen.sort_unstable();
        let want: Vec<usize> = (0..103).collect();
        assert_eq!(seen, want);
        // all but the final batch are full
        for b in &batches[..batches.len() - 1] {
            assert_eq!(b.len(), 16);
        }
    }
}
