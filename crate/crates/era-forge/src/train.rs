//! Optimization: Adam, the training loop with snapshot selection, k-fold
//! plans, and the finite-difference gradient-check harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, epoch_batches, BatchConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, ec_loss, mmc_loss, total_loss, ContrastiveBatch, EcDenominator, MmcBatch,
};
use crate::metrics::{predict_classes, acc_x, EvalProtocol, LabelSpace};
use crate::models::{BatchInputs, LossGrads, ModelConfig, ModelGraph, Variant};
use crate::nncore::{ParamStore, Tensor};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment estimates per parameter, aligned with the store's
/// registration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|(name, p)| {
                (name.to_string(), Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))
            })
            .collect();
        AdamState { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Fails without touching any
/// parameter if a gradient is non-finite, naming the offender.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (name, _, _) in &state.moments {
        if !params.grad(name).is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, m, v) in &mut state.moments {
        let p = params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Config(format!("adam state references unknown parameter {name}")))?;
        let gv = p.grad.values();
        for ((mv, vv), (&g, val)) in m
            .values_mut()
            .iter_mut()
            .zip(v.values_mut())
            .zip(gv.iter().zip(p.value.values().iter()))
        {
            let _ = val;
            *mv = beta1 * *mv + (1.0 - beta1) * g;
            *vv = beta2 * *vv + (1.0 - beta2) * g * g;
        }
        for ((val, &mv), &vv) in p
            .value
            .values_mut()
            .iter_mut()
            .zip(m.values().iter())
            .zip(v.values().iter())
        {
            let m_hat = mv / bc1;
            let v_hat = vv / bc2;
            *val -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training configuration and loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub tau_m: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Tracks per class in stratified batches.
    pub per_class: usize,
    pub excerpt_frames: usize,
    /// MMC negatives per anchor.
    pub k_negatives: usize,
    /// Stop after this many epochs without validation improvement.
    pub early_stop_patience: usize,
    /// Excerpts per track when scoring the validation set each epoch.
    pub val_excerpts: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// SupCon-style EC denominator instead of the negatives-only form.
    pub ec_supcon_denominator: bool,
    pub pad_short: bool,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            lr: 1e-4,
            batch_size: 64,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.07,
            tau_m: 0.07,
            epochs: 100,
            seed: 0,
            per_class: 2,
            excerpt_frames: 1024,
            k_negatives: 7,
            early_stop_patience: 15,
            val_excerpts: 4,
            grad_clip: 5.0,
            ec_supcon_denominator: false,
            pad_short: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        Ok(())
    }

    /// Loss weights actually applied: the audio-only variants force the
    /// terms they do not define to zero.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.variant {
            Variant::AudioCnn => (0.0, 0.0),
            Variant::AudioSuc => (0.0, self.beta),
            Variant::AudioartMmc => (self.alpha, self.beta),
        }
    }
}

/// One loss-curve row; `val_acc0` is present on epoch boundaries.
#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub mle: f64,
    pub ec: f64,
    pub mmc: f64,
    pub total: f64,
    pub val_acc0: Option<f64>,
}

pub fn curve_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,epoch,mle,ec,mmc,total,val_acc0\n");
    for r in rows {
        let val = r.val_acc0.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.step, r.epoch, r.mle, r.ec, r.mmc, r.total, val
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRow>,
    pub best_epoch: usize,
    pub best_val_acc0: f64,
    pub epochs_run: usize,
    /// Training aborted on a non-finite loss; the returned graph carries the
    /// last good snapshot.
    pub aborted: bool,
}

type Snapshot = (Vec<(String, Vec<f64>)>, Vec<(String, Vec<f64>)>);

fn take_snapshot(graph: &ModelGraph) -> Snapshot {
    let params = graph
        .params
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.values().to_vec()))
        .collect();
    (params, graph.buffers())
}

fn restore_snapshot(graph: &mut ModelGraph, snap: &Snapshot) -> Result<()> {
    for (name, values) in &snap.0 {
        graph.params.value_mut(name).values_mut().copy_from_slice(values);
    }
    for (name, values) in &snap.1 {
        graph.set_buffer(name, values)?;
    }
    Ok(())
}

/// Carve a validation subset (`fraction` of `pool`) deterministically.
pub fn split_validation(pool: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = pool.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x56414c49);
    shuffled.shuffle(&mut rng);
    let n_val = ((pool.len() as f64 * fraction).round() as usize).min(pool.len().saturating_sub(1));
    let val = shuffled[..n_val].to_vec();
    let train = shuffled[n_val..].to_vec();
    (train, val)
}

/// Train a fresh model of `model_cfg` on `train_idx`, selecting the epoch
/// snapshot with the best validation ACC_0 (ties keep the earliest epoch).
/// An epoch draws one fresh random excerpt per training track.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    space: &LabelSpace,
) -> Result<(ModelGraph, TrainOutcome)> {
    cfg.validate()?;
    if model_cfg.variant != cfg.variant {
        return Err(Error::Config("model and train configs disagree on the variant".into()));
    }
    let needs_bios = cfg.variant.needs_bios();
    let train_idx: Vec<usize> = if needs_bios {
        let kept: Vec<usize> = train_idx
            .iter()
            .cloned()
            .filter(|&i| ds.bio_vector(i).is_some())
            .collect();
        if kept.len() < train_idx.len() {
            log::warn!(
                "dropping {} of {} training tracks without biographies",
                train_idx.len() - kept.len(),
                train_idx.len()
            );
        }
        kept
    } else {
        train_idx.to_vec()
    };
    if train_idx.len() < cfg.batch_size.min(4) {
        return Err(Error::Config(format!(
            "training pool of {} tracks is too small",
            train_idx.len()
        )));
    }
    let (alpha, beta) = cfg.effective_weights();

    let mut graph = ModelGraph::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&graph.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<usize> = train_idx
        .iter()
        .map(|&i| space.year_to_class(ds.records[i].year))
        .collect::<Result<_>>()?;
    let batch_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        per_class: cfg.per_class,
        excerpt_frames: cfg.excerpt_frames,
        k_negatives: cfg.k_negatives,
        uniform: false,
        allow_single_class: cfg.variant == Variant::AudioCnn,
        pad_short: cfg.pad_short,
    };
    let val_protocol = EvalProtocol {
        excerpts_per_track: cfg.val_excerpts,
        excerpt_frames: cfg.excerpt_frames,
        seed: cfg.seed ^ 0x76616c,
        pad_short: cfg.pad_short,
    };
    let ec_mode = if cfg.ec_supcon_denominator {
        EcDenominator::SupCon
    } else {
        EcDenominator::NegativesOnly
    };

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut step: u64 = 0;
    let mut aborted = false;
    let mut epochs_run = 0;

    'epochs: for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let plan = epoch_batches(&labels, cfg.batch_size, cfg.per_class, false, &mut rng);
        for positions in plan {
            if positions.len() < 2 {
                continue;
            }
            let indices: Vec<usize> = positions.iter().map(|&p| train_idx[p]).collect();
            let batch = assemble_batch(ds, &indices, space, &batch_cfg, &mut rng)?;
            let multi_class = {
                let first = batch.labels[0];
                batch.labels.iter().any(|&l| l != first)
            };
            if !multi_class && cfg.variant != Variant::AudioCnn {
                // tail batch without contrast; skip rather than bias the EC term
                continue;
            }

            let bios_tensor = if needs_bios {
                Some(gather_bios(ds, &batch.dataset_indices, model_cfg.bio_dim)?)
            } else {
                None
            };
            let use_views = alpha > 0.0 && cfg.variant == Variant::AudioartMmc;
            let inputs = BatchInputs {
                mel: &batch.inputs,
                bios: bios_tensor.as_ref(),
                views: if use_views { Some(&batch.views) } else { None },
            };
            let pass = graph.forward(&inputs, crate::nncore::Mode::Train)?;

            let ce = cross_entropy(&pass.logits, &batch.labels)?;
            let mut ec_value = 0.0;
            let mut dz = None;
            if beta > 0.0 && multi_class {
                let z = pass.z.as_ref().expect("contrastive variant has z");
                let cb = ContrastiveBatch::new(z.clone(), batch.labels.clone(), cfg.tau)?;
                let out = ec_loss(&cb, ec_mode)?;
                ec_value = out.loss;
                let mut g = out.grad;
                g.scale(beta);
                dz = Some(g);
            }
            let mut mmc_value = 0.0;
            let mut dmmc_anchors = None;
            let mut dmmc_views = None;
            if use_views {
                let anchors = pass.mmc_anchors.as_ref().expect("mmc anchors");
                let views = pass.mmc_views.as_ref().expect("mmc views");
                let mb = MmcBatch { anchors: anchors.clone(), views: views.clone(), tau: cfg.tau_m };
                let out = mmc_loss(&mb)?;
                mmc_value = out.loss;
                let mut ga = out.grad_anchors;
                ga.scale(alpha);
                dmmc_anchors = Some(ga);
                let mut gv = out.grad_views;
                for g in &mut gv {
                    g.scale(alpha);
                }
                dmmc_views = Some(gv);
            }
            let total = total_loss(ce.loss, ec_value, mmc_value, alpha, beta)?;
            step += 1;
            curve.push(CurveRow {
                step,
                epoch,
                mle: ce.loss,
                ec: ec_value,
                mmc: mmc_value,
                total,
                val_acc0: None,
            });
            if !total.is_finite() {
                log::error!("non-finite loss at step {step}; aborting with last good snapshot");
                aborted = true;
                break 'epochs;
            }

            graph.params.zero_grads();
            graph.backward(
                &pass,
                &LossGrads { dlogits: ce.grad, dz, dmmc_anchors, dmmc_views },
            )?;
            if cfg.grad_clip > 0.0 {
                let norm = graph.params.grad_norm();
                if norm > cfg.grad_clip {
                    graph.params.scale_grads(cfg.grad_clip / norm);
                }
            }
            adam_step(&mut graph.params, &mut adam, cfg.lr, 0.9, 0.999, 1e-8)?;
        }

        let val_pool: Vec<usize> = if needs_bios {
            val_idx.iter().cloned().filter(|&i| ds.bio_vector(i).is_some()).collect()
        } else {
            val_idx.to_vec()
        };
        let val_acc0 = if val_pool.is_empty() {
            // no validation signal: treat every epoch as an improvement so
            // the final snapshot wins
            f64::MIN_POSITIVE * (epoch + 1) as f64
        } else {
            let truth: Vec<usize> = val_pool
                .iter()
                .map(|&i| space.year_to_class(ds.records[i].year))
                .collect::<Result<_>>()?;
            let pred = predict_classes(&mut graph, ds, &val_pool, &val_protocol)?;
            acc_x(&truth, &pred, 0)?
        };
        if let Some(last) = curve.last_mut() {
            last.val_acc0 = Some(val_acc0);
        }
        let improved = best.as_ref().map(|(b, _, _)| val_acc0 > *b).unwrap_or(true);
        if improved {
            best = Some((val_acc0, epoch, take_snapshot(&graph)));
        } else if let Some((_, best_epoch, _)) = &best {
            if epoch - best_epoch >= cfg.early_stop_patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }

    let (best_val_acc0, best_epoch) = match &best {
        Some((acc, epoch, snap)) => {
            restore_snapshot(&mut graph, snap)?;
            (*acc, *epoch)
        }
        None => (0.0, 0),
    };
    Ok((
        graph,
        TrainOutcome { curve, best_epoch, best_val_acc0, epochs_run, aborted },
    ))
}

/// Stack biography vectors for a batch, failing on tracks without one.
pub fn gather_bios(ds: &Dataset, indices: &[usize], bio_dim: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[indices.len(), bio_dim]);
    for (row, &idx) in indices.iter().enumerate() {
        let vec = ds.bio_vector(idx).ok_or_else(|| {
            Error::Config(format!("track {} has no biography embedding", ds.records[idx].track_id))
        })?;
        if vec.len() != bio_dim {
            return Err(Error::shape(
                "bios",
                format!("embedding width {} vs configured {}", vec.len(), bio_dim),
            ));
        }
        t.row_mut(row).copy_from_slice(vec);
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// K-fold cross-validation plan
// ---------------------------------------------------------------------------

/// Disjoint folds covering the dataset, each paired with a validation
/// subset carved from its training portion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// fold id per track index
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split tracks into `k` folds of near-equal size (within one).
pub fn kfold(n_tracks: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config("k must be at least 2".into()));
    }
    if k > n_tracks {
        return Err(Error::Config(format!("k = {k} exceeds dataset size {n_tracks}")));
    }
    let mut order: Vec<usize> = (0..n_tracks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignments = vec![0usize; n_tracks];
    for (pos, &track) in order.iter().enumerate() {
        assignments[track] = pos % k;
    }
    Ok(FoldPlan { k, seed, assignments })
}

impl FoldPlan {
    /// Held-out test fold plus train/validation split of the rest; 10% of
    /// the training portion becomes validation.
    pub fn split(&self, fold: usize) -> Result<FoldSplit> {
        if fold >= self.k {
            return Err(Error::Config(format!("fold {fold} out of range (k = {})", self.k)));
        }
        let test: Vec<usize> = (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect();
        let rest: Vec<usize> = (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect();
        let (train, val) = split_validation(&rest, 0.10, self.seed.wrapping_add(fold as u64));
        Ok(FoldSplit { train, val, test })
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max relative error observed per parameter tensor that was probed
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub probes: usize,
}

/// Central finite differences on randomly chosen parameter entries against
/// the analytic gradients. `run(graph, with_backward)` must evaluate the
/// loss on a fixed batch, backpropagating into the parameter store when
/// asked; it must be deterministic given the parameters.
pub fn grad_check<F>(
    graph: &mut ModelGraph,
    mut run: F,
    n_probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ModelGraph, bool) -> Result<f64>,
{
    graph.params.zero_grads();
    run(graph, true)?;
    let analytic: Vec<(String, Vec<f64>)> = graph
        .params
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.values().to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    let mut per_param: Vec<(String, f64)> = Vec::new();
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_probes {
        let name = &names[rng.gen_range(0..names.len())];
        let grads = &analytic.iter().find(|(n, _)| n == name).expect("probed name").1;
        let idx = rng.gen_range(0..grads.len());
        let orig = graph.params.value(name).values()[idx];
        graph.params.value_mut(name).values_mut()[idx] = orig + h;
        let lp = run(graph, false)?;
        graph.params.value_mut(name).values_mut()[idx] = orig - h;
        let lm = run(graph, false)?;
        graph.params.value_mut(name).values_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (grads[idx] - fd).abs() / fd.abs().max(1.0);
        max_rel = max_rel.max(rel);
        match per_param.iter_mut().find(|(n, _)| n == name) {
            Some((_, worst)) => *worst = worst.max(rel),
            None => per_param.push((name.clone(), rel)),
        }
    }
    Ok(GradCheckReport { per_param, max_rel_err: max_rel, probes: n_probes })
}
