//! crossval: k-fold training and evaluation with a mean-of-folds table.

use std::path::PathBuf;

use clap::Args;

use era_forge::dsp::DspConfig;
use era_forge::metrics::{evaluate, EvalProtocol, EvalReport};
use era_forge::train::{curve_to_csv, kfold, train_run};

use super::train_cmd::{resolve, TrainArgs};
use super::{in_span_indices, load_dataset, require_exists};
use crate::config::FileConfig;
use crate::run_manifest::RunRecorder;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Excerpts per track at test time
    #[arg(long)]
    pub eval_excerpts: Option<usize>,
}

pub fn run(args: CrossvalArgs) -> CliResult {
    let file_cfg = FileConfig::load(args.train.config.as_deref())?;
    require_exists(&args.train.manifest, "manifest")?;
    if args.train.variant.needs_bios() && args.train.bios.is_none() {
        return Err(CliError::Usage(
            "audioart-mmc requires --bios with artist biography embeddings".into(),
        ));
    }

    let ds = load_dataset(&args.train.manifest, args.train.bios.as_deref(), &DspConfig::default())?;
    if ds.is_empty() {
        return Err(CliError::Usage("manifest has no usable records".into()));
    }
    let n_mels = ds.feature(0)?.n_mels;
    let bio_dim = ds.bios.as_ref().map(|b| b.dim).unwrap_or(0);
    let resolved = resolve(&args.train, &file_cfg, n_mels, bio_dim)?;
    let eval_excerpts = file_cfg.resolve(args.eval_excerpts, "eval-excerpts", 8);

    // the plan spans the whole manifest; out-of-span tracks are dropped from
    // every split downstream
    let plan = kfold(ds.len(), args.k, resolved.train.seed)?;
    let usable: std::collections::HashSet<usize> =
        in_span_indices(&ds, &resolved.space).into_iter().collect();

    let mut recorder = RunRecorder::new(
        "crossval",
        serde_json::json!({
            "manifest": args.train.manifest,
            "bios": args.train.bios,
            "k": args.k,
            "model": resolved.model,
            "train": resolved.train,
            "label_space": resolved.space,
            "eval_excerpts": eval_excerpts,
        }),
    );
    recorder.record_input(&args.train.manifest)?;
    if let Some(bios) = &args.train.bios {
        recorder.record_input(bios)?;
    }
    std::fs::create_dir_all(&args.train.out)?;
    let plan_path = args.train.out.join("folds.json");
    std::fs::write(&plan_path, serde_json::to_string_pretty(&plan)?)?;
    recorder.record_output(&plan_path);

    let protocol = EvalProtocol {
        excerpts_per_track: eval_excerpts,
        excerpt_frames: resolved.train.excerpt_frames,
        seed: resolved.train.seed,
        pad_short: resolved.train.pad_short,
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for fold in 0..args.k {
        let split = plan.split(fold)?;
        let filter = |v: Vec<usize>| -> Vec<usize> {
            v.into_iter().filter(|i| usable.contains(i)).collect()
        };
        let (train_idx, val_idx, mut test_idx) =
            (filter(split.train), filter(split.val), filter(split.test));
        if resolved.model.variant.needs_bios() {
            test_idx.retain(|&i| ds.bio_vector(i).is_some());
        }
        let (mut graph, outcome) = train_run(
            &resolved.model,
            &resolved.train,
            &ds,
            &train_idx,
            &val_idx,
            &resolved.space,
        )?;
        let report = evaluate(&mut graph, &ds, &test_idx, &resolved.space, &protocol)?;
        let ckpt = args.train.out.join(format!("fold_{fold}.erac"));
        graph.save(
            &ckpt,
            serde_json::json!({
                "train": resolved.train,
                "label_space": resolved.space,
                "fold": fold,
                "best_epoch": outcome.best_epoch,
            }),
        )?;
        let report_path = args.train.out.join(format!("fold_{fold}_report.json"));
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
        let curve_path = args.train.out.join(format!("fold_{fold}_loss_curve.csv"));
        std::fs::write(&curve_path, curve_to_csv(&outcome.curve))?;
        recorder.record_output(&ckpt);
        recorder.record_output(&report_path);
        recorder.record_output(&curve_path);
        let accs: Vec<String> =
            report.acc.iter().map(|(x, v)| format!("ACC_{x}={v:.4}")).collect();
        log::info!("fold {fold}: {} test tracks, {}", report.n, accs.join(" "));
        reports.push(report);
    }

    // mean-of-folds table, one method row, tolerance columns
    let tolerances = resolved.space.granularity.tolerances();
    let mut table = String::from("method");
    for x in tolerances {
        table.push_str(&format!(",acc_{x}"));
    }
    table.push('\n');
    table.push_str(&resolved.model.variant.to_string());
    for x in tolerances {
        let mean: f64 =
            reports.iter().map(|r| r.acc[x]).sum::<f64>() / reports.len() as f64;
        table.push_str(&format!(",{mean:.4}"));
    }
    table.push('\n');
    let table_path = args.train.out.join("mean_table.csv");
    std::fs::write(&table_path, table)?;
    recorder.record_output(&table_path);
    recorder.write(&args.train.out)?;
    log::info!("crossval complete: {}", table_path.display());
    Ok(())
}
