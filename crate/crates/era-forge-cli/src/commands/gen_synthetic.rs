//! gen-synthetic: write a generated dataset to a directory.

use std::path::PathBuf;

use clap::Args;

use era_forge::data::{generate_synthetic, write_synthetic_dataset, SyntheticSpec};

use super::parse_span;
use crate::config::FileConfig;
use crate::run_manifest::RunRecorder;
use crate::CliResult;

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub tracks: Option<usize>,
    #[arg(long)]
    pub artists: Option<usize>,
    /// Inclusive year span Y0:Y1
    #[arg(long)]
    pub span: Option<String>,
    /// Strength of the year-dependent spectral trends
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of biography energy correlated with the artist era
    #[arg(long)]
    pub bio_signal: Option<f64>,
    /// Fraction of artists centered before the span midpoint (e.g. 0.1)
    #[arg(long)]
    pub imbalance: Option<f64>,
    #[arg(long)]
    pub mels: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub bio_dim: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: GenArgs) -> CliResult {
    let file_cfg = FileConfig::load(args.config.as_deref())?;
    let defaults = SyntheticSpec::default();
    let (year_lo, year_hi) = match file_cfg.resolve_opt(args.span.clone(), "span") {
        Some(s) => parse_span(&s)?,
        None => (defaults.year_lo, defaults.year_hi),
    };
    let spec = SyntheticSpec {
        n_tracks: file_cfg.resolve(args.tracks, "tracks", defaults.n_tracks),
        n_artists: file_cfg.resolve(args.artists, "artists", defaults.n_artists),
        year_lo,
        year_hi,
        seed: file_cfg.resolve(args.seed, "seed", defaults.seed),
        timbre_drift: file_cfg.resolve(args.drift, "drift", defaults.timbre_drift),
        noise: file_cfg.resolve(args.noise, "noise", defaults.noise),
        bio_signal: file_cfg.resolve(args.bio_signal, "bio-signal", defaults.bio_signal),
        pre_midpoint_fraction: file_cfg.resolve_opt(args.imbalance, "imbalance"),
        n_mels: file_cfg.resolve(args.mels, "mels", defaults.n_mels),
        n_frames: file_cfg.resolve(args.frames, "frames", defaults.n_frames),
        bio_dim: file_cfg.resolve(args.bio_dim, "bio-dim", defaults.bio_dim),
    };
    let mut recorder = RunRecorder::new(
        "gen-synthetic",
        serde_json::json!({ "spec": format!("{spec:?}"), "out": args.out }),
    );
    let ds = generate_synthetic(&spec)?;
    write_synthetic_dataset(&args.out, &ds)?;
    recorder.record_output(&args.out.join("manifest.jsonl"));
    recorder.record_output(&args.out.join("features"));
    recorder.record_output(&args.out.join("bios.bioe"));
    recorder.write(&args.out)?;
    log::info!(
        "generated {} tracks / {} artists spanning {}..={} into {}",
        ds.len(),
        spec.n_artists,
        spec.year_lo,
        spec.year_hi,
        args.out.display()
    );
    Ok(())
}
