//! train: fit one variant, emitting a checkpoint, loss curve, and manifest.

use std::path::PathBuf;

use clap::Args;

use era_forge::dsp::DspConfig;
use era_forge::metrics::Granularity;
use era_forge::models::{AudioEncoderConfig, FusionConfig, ModelConfig, Variant};
use era_forge::train::{curve_to_csv, split_validation, train_run, TrainConfig};

use super::{in_span_indices, label_space, load_dataset, parse_channels, require_exists};
use crate::config::FileConfig;
use crate::run_manifest::RunRecorder;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Biography embedding table (required for audioart-mmc)
    #[arg(long)]
    pub bios: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub base_year: Option<i32>,
    /// Class count (defaults: 64 for year, 8 for decade)
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_m: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub excerpt_frames: Option<usize>,
    /// Tracks per class in stratified batches
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub k_negatives: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fraction of the training pool held out for validation
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub val_excerpts: Option<usize>,
    /// Conv channels per block, comma separated
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub d_z: Option<usize>,
    #[arg(long)]
    pub fusion_blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_k: Option<usize>,
    /// Zero-pad features shorter than the excerpt window
    #[arg(long)]
    pub pad_short: bool,
    /// SupCon-style EC denominator (ablation)
    #[arg(long)]
    pub supcon_denominator: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Everything needed to build the model + trainer from flags; shared with
/// crossval.
pub struct ResolvedTrain {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub space: era_forge::metrics::LabelSpace,
    pub val_fraction: f64,
}

pub fn resolve(args: &TrainArgs, file_cfg: &FileConfig, n_mels: usize, bio_dim: usize) -> Result<ResolvedTrain, CliError> {
    let granularity = file_cfg.resolve(args.granularity, "granularity", Granularity::Year);
    let space = label_space(
        granularity,
        file_cfg.resolve_opt(args.base_year, "base-year"),
        file_cfg.resolve_opt(args.classes, "classes"),
    );
    let channels = match file_cfg.resolve_opt(args.channels.clone(), "channels") {
        Some(text) => parse_channels(&text)?,
        None => AudioEncoderConfig::default().block_channels,
    };
    let embed_dim = file_cfg.resolve(args.embed_dim, "embed-dim", 64);
    let mut model = ModelConfig::new(
        args.variant,
        AudioEncoderConfig {
            n_mels,
            block_channels: channels,
            embed_dim,
            n_classes: space.n_classes,
        },
    );
    model.d_z = file_cfg.resolve(args.d_z, "d-z", 32);
    model.fusion = FusionConfig {
        n_blocks: file_cfg.resolve(args.fusion_blocks, "fusion-blocks", 2),
        heads: file_cfg.resolve(args.heads, "heads", 4),
        d_k: file_cfg.resolve(args.d_k, "d-k", embed_dim / 2),
    };
    model.bio_dim = bio_dim;

    let mut train = TrainConfig::new(args.variant);
    train.lr = file_cfg.resolve(args.lr, "lr", train.lr);
    train.batch_size = file_cfg.resolve(args.batch_size, "batch-size", train.batch_size);
    train.alpha = file_cfg.resolve(args.alpha, "alpha", train.alpha);
    train.beta = file_cfg.resolve(args.beta, "beta", train.beta);
    train.tau = file_cfg.resolve(args.tau, "tau", train.tau);
    train.tau_m = file_cfg.resolve(args.tau_m, "tau-m", train.tau_m);
    train.epochs = file_cfg.resolve(args.epochs, "epochs", train.epochs);
    train.seed = file_cfg.resolve(args.seed, "seed", train.seed);
    train.per_class = file_cfg.resolve(args.per_class, "per-class", train.per_class);
    train.excerpt_frames =
        file_cfg.resolve(args.excerpt_frames, "excerpt-frames", train.excerpt_frames);
    train.k_negatives = file_cfg.resolve(args.k_negatives, "k-negatives", train.k_negatives);
    train.early_stop_patience =
        file_cfg.resolve(args.patience, "patience", train.early_stop_patience);
    train.val_excerpts = file_cfg.resolve(args.val_excerpts, "val-excerpts", train.val_excerpts);
    train.pad_short = args.pad_short || file_cfg.get("pad-short").unwrap_or(false);
    train.ec_supcon_denominator =
        args.supcon_denominator || file_cfg.get("supcon-denominator").unwrap_or(false);
    let val_fraction = file_cfg.resolve(args.val_fraction, "val-fraction", 0.10);
    Ok(ResolvedTrain { model, train, space, val_fraction })
}

pub fn run(args: TrainArgs) -> CliResult {
    let file_cfg = FileConfig::load(args.config.as_deref())?;
    require_exists(&args.manifest, "manifest")?;
    if args.variant.needs_bios() && args.bios.is_none() {
        return Err(CliError::Usage(
            "audioart-mmc requires --bios with artist biography embeddings".into(),
        ));
    }
    if let Some(bios) = &args.bios {
        require_exists(bios, "bios table")?;
    }

    let ds = load_dataset(&args.manifest, args.bios.as_deref(), &DspConfig::default())?;
    if ds.is_empty() {
        return Err(CliError::Usage("manifest has no usable records".into()));
    }
    let n_mels = ds.feature(0)?.n_mels;
    let bio_dim = ds.bios.as_ref().map(|b| b.dim).unwrap_or(0);
    let resolved = resolve(&args, &file_cfg, n_mels, bio_dim)?;

    let pool = in_span_indices(&ds, &resolved.space);
    let (train_idx, val_idx) =
        split_validation(&pool, resolved.val_fraction, resolved.train.seed);

    let mut recorder = RunRecorder::new(
        "train",
        serde_json::json!({
            "manifest": args.manifest,
            "bios": args.bios,
            "model": resolved.model,
            "train": resolved.train,
            "label_space": resolved.space,
            "val_fraction": resolved.val_fraction,
        }),
    );
    recorder.record_input(&args.manifest)?;
    if let Some(bios) = &args.bios {
        recorder.record_input(bios)?;
    }

    let (graph, outcome) = train_run(
        &resolved.model,
        &resolved.train,
        &ds,
        &train_idx,
        &val_idx,
        &resolved.space,
    )?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.erac");
    graph.save(
        &ckpt,
        serde_json::json!({
            "train": resolved.train,
            "label_space": resolved.space,
            "best_epoch": outcome.best_epoch,
            "best_val_acc0": outcome.best_val_acc0,
            "aborted": outcome.aborted,
        }),
    )?;
    let curve = args.out.join("loss_curve.csv");
    std::fs::write(&curve, curve_to_csv(&outcome.curve))?;
    recorder.record_output(&ckpt);
    recorder.record_output(&curve);
    recorder.write(&args.out)?;
    log::info!(
        "trained {}: best epoch {} (val ACC_0 {:.4}), checkpoint {}",
        args.variant,
        outcome.best_epoch,
        outcome.best_val_acc0,
        ckpt.display()
    );
    if outcome.aborted {
        return Err(CliError::Runtime(
            "training aborted on a non-finite loss; checkpoint holds the last good snapshot".into(),
        ));
    }
    Ok(())
}
