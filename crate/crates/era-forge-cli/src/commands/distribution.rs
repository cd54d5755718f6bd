//! plot-distribution: per-year histogram CSV for external plotting.

use std::path::PathBuf;

use clap::Args;

use era_forge::data::load_manifest;
use era_forge::metrics::{class_distribution, distribution_csv};

use super::require_exists;
use crate::run_manifest::RunRecorder;
use crate::CliResult;

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output CSV (year, count)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: PlotArgs) -> CliResult {
    require_exists(&args.manifest, "manifest")?;
    let mut recorder = RunRecorder::new(
        "plot-distribution",
        serde_json::json!({ "manifest": args.manifest, "out": args.out }),
    );
    recorder.record_input(&args.manifest)?;
    let records = load_manifest(&args.manifest)?;
    let hist = class_distribution(records.iter().map(|r| r.year));
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, distribution_csv(&hist))?;
    recorder.record_output(&args.out);
    recorder.write_to_file(&args.out.with_extension("run.json"))?;
    log::info!(
        "wrote {} year bins covering {} tracks to {}",
        hist.len(),
        records.len(),
        args.out.display()
    );
    Ok(())
}
