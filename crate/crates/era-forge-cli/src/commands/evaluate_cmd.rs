//! evaluate: score a checkpoint on a manifest or one fold's test split.

use std::path::PathBuf;

use clap::Args;

use era_forge::dsp::DspConfig;
use era_forge::metrics::{evaluate, EvalProtocol, Granularity, LabelSpace};
use era_forge::models::ModelGraph;
use era_forge::train::FoldPlan;

use super::{in_span_indices, load_dataset, require_exists};
use crate::config::FileConfig;
use crate::run_manifest::RunRecorder;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bios: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fold plan JSON produced by crossval
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Which fold's test split to score (requires --folds)
    #[arg(long)]
    pub fold: Option<usize>,
    /// Cross-check against the checkpoint's granularity
    #[arg(long)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub excerpts: Option<usize>,
    #[arg(long)]
    pub excerpt_frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pad_short: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Pull the label space out of a checkpoint's training-config echo.
pub fn space_from_header(train_header: &serde_json::Value) -> Result<LabelSpace, CliError> {
    serde_json::from_value(train_header["label_space"].clone())
        .map_err(|e| CliError::Runtime(format!("checkpoint lacks a label_space header: {e}")))
}

pub fn run(args: EvaluateArgs) -> CliResult {
    let file_cfg = FileConfig::load(args.config.as_deref())?;
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.manifest, "manifest")?;
    let (mut graph, train_header) = ModelGraph::load(&args.checkpoint)?;
    let space = space_from_header(&train_header)?;
    if let Some(g) = file_cfg.resolve_opt(args.granularity, "granularity") {
        if g != space.granularity {
            return Err(CliError::Usage(format!(
                "granularity mismatch: checkpoint was trained at {:?}",
                space.granularity
            )));
        }
    }
    let default_frames = train_header["train"]["excerpt_frames"].as_u64().unwrap_or(1024) as usize;
    let protocol = EvalProtocol {
        excerpts_per_track: file_cfg.resolve(args.excerpts, "excerpts", 8),
        excerpt_frames: file_cfg.resolve(args.excerpt_frames, "excerpt-frames", default_frames),
        seed: file_cfg.resolve(args.seed, "seed", 0),
        pad_short: args.pad_short || file_cfg.get("pad-short").unwrap_or(false),
    };

    let ds = load_dataset(&args.manifest, args.bios.as_deref(), &DspConfig::default())?;
    let mut indices = in_span_indices(&ds, &space);
    if graph.config.variant.needs_bios() {
        indices.retain(|&i| ds.bio_vector(i).is_some());
    }
    if let Some(folds_path) = &args.folds {
        let fold = args.fold.ok_or_else(|| {
            CliError::Usage("--folds needs --fold to pick the test split".into())
        })?;
        let plan: FoldPlan = serde_json::from_str(&std::fs::read_to_string(folds_path)?)?;
        if plan.assignments.len() != ds.len() {
            return Err(CliError::Usage(format!(
                "fold plan covers {} tracks, manifest has {}",
                plan.assignments.len(),
                ds.len()
            )));
        }
        let split = plan.split(fold)?;
        let test: std::collections::HashSet<usize> = split.test.into_iter().collect();
        indices.retain(|i| test.contains(i));
    }
    if indices.is_empty() {
        return Err(CliError::Runtime("no scorable tracks after filtering".into()));
    }

    let mut recorder = RunRecorder::new(
        "evaluate",
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "bios": args.bios,
            "folds": args.folds,
            "fold": args.fold,
            "protocol": protocol,
        }),
    );
    recorder.record_input(&args.checkpoint)?;
    recorder.record_input(&args.manifest)?;

    let report = evaluate(&mut graph, &ds, &indices, &space, &protocol)?;
    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("eval_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let confusion_path = args.out.join("confusion.csv");
    std::fs::write(&confusion_path, report.confusion_csv())?;
    recorder.record_output(&report_path);
    recorder.record_output(&confusion_path);
    recorder.write(&args.out)?;
    let accs: Vec<String> = report.acc.iter().map(|(x, v)| format!("ACC_{x}={v:.4}")).collect();
    log::info!("evaluated {} tracks: {}", report.n, accs.join(" "));
    Ok(())
}
