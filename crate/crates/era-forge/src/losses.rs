//! Training objectives: cross-entropy, the era-contrastive (EC) loss, the
//! multimodal-contrastive (MMC) loss, and their weighted sum.
//!
//! All losses return the scalar value plus analytic gradients w.r.t. their
//! tensor inputs; model code is responsible for propagating those gradients
//! further. Exponentials are evaluated through log-sum-exp so the losses stay
//! finite for any normalized inputs and any temperature in [1e-3, 1e3].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Scalar loss plus gradient w.r.t. one tensor input.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

/// Mean over the batch of `-log softmax(logits)[label]`; gradient is
/// `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("cross_entropy", format!("expected [B, C], got {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    if c < 2 {
        return Err(Error::Config(format!("cross_entropy needs C >= 2 classes, got {c}")));
    }
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {} rows", labels.len(), b),
        ));
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    for i in 0..b {
        let label = labels[i];
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let grow = grad.row_mut(i);
        for (k, &v) in row.iter().enumerate() {
            grow[k] = ((v - lse).exp() - if k == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(LossOutput { loss: loss / b as f64, grad })
}

// ---------------------------------------------------------------------------
// Era-contrastive loss
// ---------------------------------------------------------------------------

/// Within-batch index sets: same-label rows (excluding self) and
/// different-label rows per anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosNegSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Build P(i)/N(i) from labels.
pub fn build_pos_neg(labels: &[usize]) -> PosNegSets {
    let n = labels.len();
    let mut positives = vec![Vec::new(); n];
    let mut negatives = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                positives[i].push(j);
            } else {
                negatives[i].push(j);
            }
        }
    }
    PosNegSets { positives, negatives }
}

/// Normalized projections with labels and their P/N sets.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `[B x d_z]`, rows L2-normalized by the projection head.
    pub z: Tensor,
    pub labels: Vec<usize>,
    pub sets: PosNegSets,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn new(z: Tensor, labels: Vec<usize>, tau: f64) -> Result<Self> {
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::shape(
                "contrastive batch",
                format!("z {:?} vs {} labels", z.shape(), labels.len()),
            ));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let sets = build_pos_neg(&labels);
        Ok(ContrastiveBatch { z, labels, sets, tau })
    }
}

/// Denominator convention for the EC loss. The literal form sums over
/// different-label rows only; the SupCon-compatible variant sums over all
/// other rows and averages each anchor by its positive count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EcDenominator {
    #[default]
    NegativesOnly,
    SupCon,
}

/// EC loss: `-sum_i sum_{j in P(i)} log( exp(z_i.z_j/tau) /
/// sum_{k in N(i)} exp(z_i.z_k/tau) )`. Anchors with no positives are
/// skipped. Returns the gradient w.r.t. every row of `z`.
pub fn ec_loss(batch: &ContrastiveBatch, denominator: EcDenominator) -> Result<LossOutput> {
    let b = batch.labels.len();
    let d = batch.z.shape()[1];
    let tau = batch.tau;
    if batch.sets.negatives.iter().all(|n| n.is_empty()) {
        return Err(Error::SingleClassBatch);
    }
    let sim = |i: usize, j: usize| -> f64 {
        batch.z.row(i).iter().zip(batch.z.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau
    };
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let pos = &batch.sets.positives[i];
        if pos.is_empty() {
            continue;
        }
        let supcon_set: Vec<usize>;
        let denom_set: &[usize] = match denominator {
            EcDenominator::NegativesOnly => &batch.sets.negatives[i],
            EcDenominator::SupCon => {
                supcon_set = (0..b).filter(|&k| k != i).collect();
                &supcon_set
            }
        };
        if denom_set.is_empty() {
            continue;
        }
        let sims: Vec<f64> = denom_set.iter().map(|&k| sim(i, k)).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let weight = match denominator {
            EcDenominator::NegativesOnly => 1.0,
            EcDenominator::SupCon => 1.0 / pos.len() as f64,
        };
        for &j in pos {
            loss += weight * (lse - sim(i, j));
            // numerator term: -z_j/tau into row i, -z_i/tau into row j
            add_scaled_row(&mut grad, i, &batch.z, j, -weight / tau);
            add_scaled_row(&mut grad, j, &batch.z, i, -weight / tau);
        }
        // denominator term: softmax weights over the denominator set,
        // entering once per numerator term
        let scale = weight * pos.len() as f64;
        for (&k, &s) in denom_set.iter().zip(&sims) {
            let p = (s - lse).exp() * scale;
            add_scaled_row(&mut grad, i, &batch.z, k, p / tau);
            add_scaled_row(&mut grad, k, &batch.z, i, p / tau);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("ec loss".into()));
    }
    Ok(LossOutput { loss, grad })
}

fn add_scaled_row(grad: &mut Tensor, into: usize, z: &Tensor, from: usize, s: f64) {
    let d = z.shape()[1];
    let src: Vec<f64> = z.row(from).to_vec();
    let dst = &mut grad.values_mut()[into * d..(into + 1) * d];
    for (g, v) in dst.iter_mut().zip(src) {
        *g += s * v;
    }
}

// ---------------------------------------------------------------------------
// Text-shuffle view construction
// ---------------------------------------------------------------------------

/// Negative-view assignment for one batch: for each anchor, the indices of
/// rows whose biography will be paired with the anchor's audio.
pub type ViewAssignments = Vec<Vec<usize>>;

/// Pick up to `k` negatives per anchor uniformly without replacement from
/// same-class, different-artist rows. Anchors with no candidates get an
/// empty list (they are skipped by the MMC loss). Deterministic per seed.
pub fn text_shuffle(
    classes: &[usize],
    artists: &[usize],
    k: usize,
    rng_seed: u64,
) -> Result<ViewAssignments> {
    if classes.len() != artists.len() {
        return Err(Error::shape(
            "text_shuffle",
            format!("{} classes vs {} artists", classes.len(), artists.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = classes.len();
    let mut out = Vec::with_capacity(n);
    let mut clamped = 0usize;
    let mut unusable = 0usize;
    for i in 0..n {
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&j| j != i && classes[j] == classes[i] && artists[j] != artists[i])
            .collect();
        if candidates.is_empty() {
            unusable += 1;
            out.push(Vec::new());
            continue;
        }
        if candidates.len() < k {
            clamped += 1;
        }
        candidates.shuffle(&mut rng);
        candidates.truncate(k);
        out.push(candidates);
    }
    if unusable > 0 {
        log::warn!("text_shuffle: {unusable}/{n} anchors have no same-class different-artist rows");
    }
    if clamped > 0 {
        log::warn!("text_shuffle: clamped K to available candidates for {clamped}/{n} anchors");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Multimodal-contrastive loss
// ---------------------------------------------------------------------------

/// Anchors are the projected biography embeddings; each anchor carries its
/// matched multimodal view (row 0) plus K shuffled negatives.
#[derive(Debug, Clone)]
pub struct MmcBatch {
    /// `[B x d]` rows of f_T(t_i).
    pub anchors: Tensor,
    /// Per anchor `[1 + K_i x d]`; row 0 is the matched view. `K_i = 0`
    /// marks an unusable anchor that contributes nothing.
    pub views: Vec<Tensor>,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct MmcOutput {
    pub loss: f64,
    pub grad_anchors: Tensor,
    pub grad_views: Vec<Tensor>,
    /// Number of anchors that actually contributed terms.
    pub used_anchors: usize,
}

/// MMC loss: per anchor, InfoNCE over the matched view plus its negatives:
/// `-log( exp(u.v_0/tau) / sum_k exp(u.v_k/tau) )` summed over anchors.
pub fn mmc_loss(batch: &MmcBatch) -> Result<MmcOutput> {
    let b = batch.anchors.shape()[0];
    if batch.views.len() != b {
        return Err(Error::shape(
            "mmc_loss",
            format!("{} anchors vs {} view groups", b, batch.views.len()),
        ));
    }
    if batch.tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {}", batch.tau)));
    }
    let d = batch.anchors.shape()[1];
    let tau = batch.tau;
    let mut loss = 0.0;
    let mut grad_anchors = Tensor::zeros(&[b, d]);
    let mut grad_views = Vec::with_capacity(b);
    let mut used = 0usize;
    for i in 0..b {
        let views = &batch.views[i];
        let rows = views.shape()[0];
        let mut gv = Tensor::zeros(views.shape());
        if rows >= 2 {
            used += 1;
            let u: Vec<f64> = batch.anchors.row(i).to_vec();
            let sims: Vec<f64> = (0..rows)
                .map(|r| views.row(r).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + sims.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - sims[0];
            for r in 0..rows {
                let coeff = ((sims[r] - lse).exp() - if r == 0 { 1.0 } else { 0.0 }) / tau;
                // d/du += coeff * v_r ; d/dv_r = coeff * u
                for (ga, &vv) in grad_anchors.row_mut(i).iter_mut().zip(views.row(r)) {
                    *ga += coeff * vv;
                }
                for (g, &uv) in gv.row_mut(r).iter_mut().zip(&u) {
                    *g = coeff * uv;
                }
            }
        }
        grad_views.push(gv);
    }
    if used == 0 {
        log::warn!("mmc_loss: no usable anchors in batch; contributing 0");
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("mmc loss".into()));
    }
    Ok(MmcOutput { loss, grad_anchors, grad_views, used_anchors: used })
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

/// `L = mle + alpha * mmc + beta * ec`.
pub fn total_loss(mle: f64, ec: f64, mmc: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be nonnegative, got alpha={alpha} beta={beta}"
        )));
    }
    Ok(mle + alpha * mmc + beta * ec)
}
