//! Era-label granularities and the tolerance accuracy ACC_x.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class width in years: one class per year or one per decade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Year,
    Decade,
}

impl Granularity {
    pub fn n_years(self) -> i32 {
        match self {
            Granularity::Year => 1,
            Granularity::Decade => 10,
        }
    }

    /// Tolerances reported for this granularity: ACC_0..3 for year classes,
    /// ACC_0..2 for decade classes.
    pub fn tolerances(self) -> &'static [usize] {
        match self {
            Granularity::Year => &[0, 1, 2, 3],
            Granularity::Decade => &[0, 1, 2],
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "year" => Ok(Granularity::Year),
            "decade" => Ok(Granularity::Decade),
            other => Err(Error::Config(format!("unknown granularity: {other}"))),
        }
    }
}

/// The year span a model classifies over: `n_classes` consecutive classes of
/// `granularity.n_years()` width starting at `base_year`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub granularity: Granularity,
    pub base_year: i32,
    pub n_classes: usize,
}

impl LabelSpace {
    /// Defaults matching the two evaluation scenarios: 64 one-year classes
    /// from 1947, or 8 decade classes from 1940.
    pub fn default_for(granularity: Granularity) -> Self {
        match granularity {
            Granularity::Year => LabelSpace { granularity, base_year: 1947, n_classes: 64 },
            Granularity::Decade => LabelSpace { granularity, base_year: 1940, n_classes: 8 },
        }
    }

    pub fn last_year(&self) -> i32 {
        self.base_year + self.n_classes as i32 * self.granularity.n_years() - 1
    }

    pub fn year_to_class(&self, year: i32) -> Result<usize> {
        year_to_class(year, self.granularity, self.base_year, self.n_classes)
    }

    /// Midpoint year of a class span (floor for even widths).
    pub fn class_midpoint_year(&self, class: usize) -> i32 {
        let w = self.granularity.n_years();
        self.base_year + class as i32 * w + (w - 1) / 2
    }
}

/// One track's era label under a chosen granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraLabel {
    pub year: i32,
    pub class_index: usize,
    pub granularity: Granularity,
}

impl EraLabel {
    pub fn new(year: i32, space: &LabelSpace) -> Result<Self> {
        Ok(EraLabel {
            year,
            class_index: space.year_to_class(year)?,
            granularity: space.granularity,
        })
    }
}

/// Floor division of the year offset by the class width.
pub fn year_to_class(
    year: i32,
    granularity: Granularity,
    base_year: i32,
    n_classes: usize,
) -> Result<usize> {
    let hi = base_year + n_classes as i32 * granularity.n_years() - 1;
    if year < base_year || year > hi {
        return Err(Error::YearOutOfRange { year, lo: base_year, hi });
    }
    Ok(((year - base_year) / granularity.n_years()) as usize)
}

/// Accuracy with +-x classes of tolerance. For x >= 1 each item earns
/// `(x - min(|y - yhat|, x)) / x`; x = 0 is the exact-match rate. Distances
/// are in class-index units of the active granularity.
pub fn acc_x(truth: &[usize], pred: &[usize], x: usize) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::shape(
            "acc_x",
            format!("{} truths vs {} predictions", truth.len(), pred.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::Config("acc_x of an empty prediction set".into()));
    }
    let n = truth.len() as f64;
    if x == 0 {
        let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
        return Ok(hits as f64 / n);
    }
    let xf = x as f64;
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| {
            let d = (t as i64 - p as i64).unsigned_abs() as f64;
            (xf - d.min(xf)) / xf
        })
        .sum();
    Ok(total / n)
}

/// Evaluation summary: tolerance accuracies, confusion counts, and the
/// number of scored tracks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// tolerance -> ACC_x
    pub acc: BTreeMap<usize, f64>,
    /// row-major `[n_classes x n_classes]`, rows = truth, cols = prediction
    pub confusion: Vec<u64>,
    pub n_classes: usize,
    pub n: usize,
}

impl EvalReport {
    pub fn from_predictions(
        truth: &[usize],
        pred: &[usize],
        n_classes: usize,
        tolerances: &[usize],
    ) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape(
                "eval report",
                format!("{} truths vs {} predictions", truth.len(), pred.len()),
            ));
        }
        let mut confusion = vec![0u64; n_classes * n_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n_classes {
                return Err(Error::LabelOutOfRange { label: t, classes: n_classes });
            }
            if p >= n_classes {
                return Err(Error::LabelOutOfRange { label: p, classes: n_classes });
            }
            confusion[t * n_classes + p] += 1;
        }
        let mut acc = BTreeMap::new();
        for &x in tolerances {
            acc.insert(x, acc_x(truth, pred, x)?);
        }
        Ok(EvalReport { acc, confusion, n_classes, n: truth.len() })
    }

    /// Merge two shards (confusion matrices add; accuracies recombine by
    /// weighted average).
    pub fn merge(&self, other: &EvalReport) -> Result<EvalReport> {
        if self.n_classes != other.n_classes {
            return Err(Error::Config("merging reports with different class counts".into()));
        }
        let mut confusion = self.confusion.clone();
        for (a, b) in confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        let n = self.n + other.n;
        let mut acc = BTreeMap::new();
        for (&x, &a) in &self.acc {
            let b = *other
                .acc
                .get(&x)
                .ok_or_else(|| Error::Config(format!("tolerance {x} missing in merge")))?;
            acc.insert(x, (a * self.n as f64 + b * other.n as f64) / n as f64);
        }
        Ok(EvalReport { acc, confusion, n_classes: self.n_classes, n })
    }

    /// Confusion matrix as CSV: header row of predicted classes, then one
    /// row per true class.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for c in 0..self.n_classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for t in 0..self.n_classes {
            out.push_str(&t.to_string());
            for p in 0..self.n_classes {
                out.push_str(&format!(",{}", self.confusion[t * self.n_classes + p]));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-year histogram of a track list (for the distribution plot export).
pub fn class_distribution(years: impl IntoIterator<Item = i32>) -> BTreeMap<i32, usize> {
    let mut hist = BTreeMap::new();
    for y in years {
        *hist.entry(y).or_insert(0) += 1;
    }
    hist
}

pub fn distribution_csv(hist: &BTreeMap<i32, usize>) -> String {
    let mut out = String::from("year,count\n");
    for (year, count) in hist {
        out.push_str(&format!("{year},{count}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_worked_examples_for_decade_classes() {
        // 1981 and 1982 fall in the 1980s class; 2011 is the 2010s class
        assert_eq!(year_to_class(1981, Granularity::Decade, 1940, 8).unwrap(), 4);
        assert_eq!(year_to_class(1982, Granularity::Decade, 1940, 8).unwrap(), 4);
        assert_eq!(year_to_class(2011, Granularity::Decade, 1940, 8).unwrap(), 7);
    }

    #[test]
    fn year_granularity_base_case() {
        assert_eq!(year_to_class(1947, Granularity::Year, 1947, 64).unwrap(), 0);
        assert_eq!(year_to_class(2010, Granularity::Year, 1947, 64).unwrap(), 63);
    }

    #[test]
    fn out_of_range_years_name_the_span() {
        let err = year_to_class(1900, Granularity::Year, 1947, 64).unwrap_err();
        match err {
            Error::YearOutOfRange { year, lo, hi } => {
                assert_eq!((year, lo, hi), (1900, 1947, 2010));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(year_to_class(2020, Granularity::Decade, 1940, 8).is_err());
    }

    #[test]
    fn midpoint_round_trips_within_the_class_span() {
        let space = LabelSpace::default_for(Granularity::Decade);
        for class in 0..8 {
            let mid = space.class_midpoint_year(class);
            assert_eq!(space.year_to_class(mid).unwrap(), class);
        }
        let space = LabelSpace::default_for(Granularity::Year);
        for class in 0..64 {
            let mid = space.class_midpoint_year(class);
            assert_eq!(space.year_to_class(mid).unwrap(), class);
        }
    }

    #[test]
    fn acc_x_perfect_prediction_is_one() {
        let y = vec![3usize, 5, 0, 7];
        for x in 0..4 {
            assert_eq!(acc_x(&y, &y, x).unwrap(), 1.0);
        }
    }

    #[test]
    fn acc_x_partial_credit_formula() {
        // |y - yhat| = 1 at x = 3 earns (3-1)/3
        let v = acc_x(&[5], &[4], 3).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        // |y - yhat| = 5 clamps to zero at x = 3
        assert_eq!(acc_x(&[5], &[0], 3).unwrap(), 0.0);
    }

    #[test]
    fn acc_zero_is_exact_match_rate() {
        assert_eq!(acc_x(&[1, 2, 3, 4], &[1, 2, 0, 0], 0).unwrap(), 0.5);
    }

    #[test]
    fn acc_x_rejects_length_mismatch() {
        assert!(acc_x(&[1, 2], &[1], 1).is_err());
    }

    #[test]
    fn acc_x_matches_per_item_loop_oracle_and_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let c = rng.gen_range(2..64);
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let mut prev = -1.0;
            for x in 0..4usize {
                let got = acc_x(&truth, &pred, x).unwrap();
                // brute-force per-item loop
                let mut sum = 0.0;
                for i in 0..n {
                    let d = (truth[i] as i64 - pred[i] as i64).unsigned_abs() as f64;
                    sum += if x == 0 {
                        if d == 0.0 { 1.0 } else { 0.0 }
                    } else {
                        (x as f64 - d.min(x as f64)) / x as f64
                    };
                }
                let want = sum / n as f64;
                assert!((got - want).abs() < 1e-15);
                assert!((0.0..=1.0).contains(&got));
                assert!(got >= prev - 1e-15, "ACC_x dropped: {prev} -> {got}");
                prev = got;
            }
        }
    }

    #[test]
    fn report_confusion_rows_sum_to_per_class_counts() {
        let truth = vec![0usize, 0, 1, 2, 2, 2];
        let pred = vec![0usize, 1, 1, 2, 0, 2];
        let r = EvalReport::from_predictions(&truth, &pred, 3, &[0, 1]).unwrap();
        let row_sums: Vec<u64> = (0..3)
            .map(|t| (0..3).map(|p| r.confusion[t * 3 + p]).sum())
            .collect();
        assert_eq!(row_sums, vec![2, 1, 3]);
        assert_eq!(r.n, 6);
    }

    #[test]
    fn report_single_correct_track() {
        let r = EvalReport::from_predictions(&[4], &[4], 8, &[0, 1, 2]).unwrap();
        for (_, &v) in &r.acc {
            assert_eq!(v, 1.0);
        }
        assert_eq!(r.confusion.iter().sum::<u64>(), 1);
        assert_eq!(r.confusion[4 * 8 + 4], 1);
    }

    #[test]
    fn report_two_tracks_one_off_by_two() {
        let r = EvalReport::from_predictions(&[1, 5], &[1, 3], 8, &[2]).unwrap();
        assert!((r.acc[&2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn merged_reports_recover_pooled_accuracy() {
        let a = EvalReport::from_predictions(&[0, 1], &[0, 0], 3, &[0]).unwrap();
        let b = EvalReport::from_predictions(&[2, 2], &[2, 2], 3, &[0]).unwrap();
        let m = a.merge(&b).unwrap();
        assert_eq!(m.n, 4);
        assert!((m.acc[&0] - 0.75).abs() < 1e-12);
        assert_eq!(m.confusion.iter().sum::<u64>(), 4);
    }

    #[test]
    fn distribution_counts_conserve_total() {
        let years: Vec<i32> = (0..640).map(|i| 1947 + (i % 64)).collect();
        let hist = class_distribution(years.iter().cloned());
        assert_eq!(hist.len(), 64);
        assert!(hist.values().all(|&c| c == 10));
        assert_eq!(hist.values().sum::<usize>(), 640);
        let empty = class_distribution(std::iter::empty());
        assert!(empty.is_empty());
    }
}

// ---------------------------------------------------------------------------
// Model evaluation over a dataset
// ---------------------------------------------------------------------------

use crate::data::Dataset;
use crate::dsp::{sample_excerpt_or_pad, sample_excerpt_with};
use crate::models::ModelGraph;
use crate::nncore::Tensor;
use rand::SeedableRng;

/// Excerpt protocol for track-level predictions: logits are averaged over
/// `excerpts_per_track` random excerpts before the argmax.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub excerpts_per_track: usize,
    pub excerpt_frames: usize,
    pub seed: u64,
    pub pad_short: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { excerpts_per_track: 8, excerpt_frames: 1024, seed: 0, pad_short: false }
    }
}

/// Track-level class predictions for `indices` of the dataset.
pub fn predict_classes(
    graph: &mut ModelGraph,
    ds: &Dataset,
    indices: &[usize],
    protocol: &EvalProtocol,
) -> Result<Vec<usize>> {
    let e = protocol.excerpts_per_track.max(1);
    let needs_bios = graph.config.variant.needs_bios();
    let mut preds = Vec::with_capacity(indices.len());
    for &idx in indices {
        let m = ds.feature(idx)?;
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(protocol.seed ^ (idx as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let plane = m.n_mels * protocol.excerpt_frames;
        let mut mel = Tensor::zeros(&[e, 1, m.n_mels, protocol.excerpt_frames]);
        for row in 0..e {
            let ex = if protocol.pad_short {
                sample_excerpt_or_pad(m, protocol.excerpt_frames, &mut rng)?
            } else {
                sample_excerpt_with(m, protocol.excerpt_frames, &mut rng)?
            };
            mel.values_mut()[row * plane..(row + 1) * plane].copy_from_slice(&ex.values);
        }
        let bios_tensor;
        let bios = if needs_bios {
            let vec = ds.bio_vector(idx).ok_or_else(|| {
                Error::Config(format!(
                    "track {} has no biography embedding; required by {}",
                    ds.records[idx].track_id, graph.config.variant
                ))
            })?;
            let mut t = Tensor::zeros(&[e, vec.len()]);
            for row in 0..e {
                t.row_mut(row).copy_from_slice(vec);
            }
            bios_tensor = t;
            Some(&bios_tensor)
        } else {
            None
        };
        let logits = graph.predict_logits(&mel, bios)?;
        let c = logits.shape()[1];
        let mut mean = vec![0.0; c];
        for row in 0..e {
            for (acc, &v) in mean.iter_mut().zip(logits.row(row)) {
                *acc += v;
            }
        }
        let pred = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        preds.push(pred);
    }
    Ok(preds)
}

/// Track-level evaluation: ACC_x at the granularity's tolerances plus the
/// confusion matrix.
pub fn evaluate(
    graph: &mut ModelGraph,
    ds: &Dataset,
    indices: &[usize],
    space: &LabelSpace,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Config("evaluate on an empty dataset".into()));
    }
    if graph.config.encoder.n_classes != space.n_classes {
        return Err(Error::Config(format!(
            "granularity mismatch: model has {} classes, label space {}",
            graph.config.encoder.n_classes, space.n_classes
        )));
    }
    let truth: Vec<usize> = indices
        .iter()
        .map(|&i| space.year_to_class(ds.records[i].year))
        .collect::<Result<_>>()?;
    let pred = predict_classes(graph, ds, indices, protocol)?;
    EvalReport::from_predictions(&truth, &pred, space.n_classes, space.granularity.tolerances())
}
