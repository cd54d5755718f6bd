//! extract-features: WAV -> MELS feature files, parallel over tracks.

use std::path::PathBuf;
use std::sync::Mutex;

use clap::Args;
use rayon::prelude::*;

use era_forge::data::{load_manifest, save_manifest, TrackRecord};
use era_forge::dsp::{melspectrogram, read_wav_mono, resample, write_mels, DspConfig};

use super::{env_thread_cap, require_exists};
use crate::config::FileConfig;
use crate::run_manifest::RunRecorder;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct ExtractArgs {
    /// JSONL manifest with audio_path entries
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for features and the updated manifest
    #[arg(long)]
    pub out: PathBuf,
    /// Target sample rate in Hz
    #[arg(long)]
    pub rate: Option<u32>,
    /// Analysis window size (power of two)
    #[arg(long)]
    pub win: Option<usize>,
    /// Hop size in samples
    #[arg(long)]
    pub hop: Option<usize>,
    /// Mel band count
    #[arg(long)]
    pub mels: Option<usize>,
    /// Lower filterbank edge in Hz
    #[arg(long)]
    pub f_min: Option<f64>,
    /// Upper filterbank edge in Hz (defaults to Nyquist)
    #[arg(long)]
    pub f_max: Option<f64>,
    /// Worker threads (ERA_FORGE_THREADS caps this)
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSON config file mirroring these flags
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: ExtractArgs) -> CliResult {
    let file_cfg = FileConfig::load(args.config.as_deref())?;
    let dsp = DspConfig {
        sample_rate: file_cfg.resolve(args.rate, "rate", 22050),
        win: file_cfg.resolve(args.win, "win", 2048),
        hop: file_cfg.resolve(args.hop, "hop", 512),
        n_mels: file_cfg.resolve(args.mels, "mels", 224),
        f_min: file_cfg.resolve(args.f_min, "f-min", 0.0),
        f_max: file_cfg.resolve_opt(args.f_max, "f-max"),
    };
    let workers = file_cfg.resolve_opt(args.workers, "workers");
    require_exists(&args.manifest, "manifest")?;

    let mut recorder = RunRecorder::new(
        "extract-features",
        serde_json::json!({
            "manifest": args.manifest,
            "out": args.out,
            "dsp": dsp,
            "workers": workers,
        }),
    );
    recorder.record_input(&args.manifest)?;

    let records = load_manifest(&args.manifest)?;
    if records.is_empty() {
        return Err(CliError::Usage("manifest has no usable records".into()));
    }
    let base = args.manifest.parent().unwrap_or_else(|| std::path::Path::new("."));
    let features_dir = args.out.join("features");
    std::fs::create_dir_all(&features_dir)?;

    let mut pool_builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers.into_iter().chain(env_thread_cap()).min() {
        pool_builder = pool_builder.num_threads(n.max(1));
    }
    let pool = pool_builder
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;

    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let results: Vec<Option<TrackRecord>> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let audio_rel = match &rec.audio_path {
                    Some(p) => p.clone(),
                    None => {
                        failures
                            .lock()
                            .expect("failure log")
                            .push(format!("{}: no audio_path", rec.track_id));
                        return None;
                    }
                };
                let audio = if audio_rel.is_absolute() { audio_rel } else { base.join(audio_rel) };
                let result = read_wav_mono(&audio)
                    .and_then(|w| resample(&w, dsp.sample_rate))
                    .and_then(|w| melspectrogram(&w, &dsp));
                match result {
                    Ok(mel) => {
                        let rel = PathBuf::from("features").join(format!("{}.mels", rec.track_id));
                        if let Err(e) = write_mels(&args.out.join(&rel), &mel) {
                            failures
                                .lock()
                                .expect("failure log")
                                .push(format!("{}: {e}", rec.track_id));
                            return None;
                        }
                        let mut updated = rec.clone();
                        updated.audio_path = None;
                        updated.feature_path = Some(rel);
                        Some(updated)
                    }
                    Err(e) => {
                        failures
                            .lock()
                            .expect("failure log")
                            .push(format!("{}: {e}", rec.track_id));
                        None
                    }
                }
            })
            .collect()
    });

    let failures = failures.into_inner().expect("failure log");
    let ok: Vec<TrackRecord> = results.into_iter().flatten().collect();
    if !failures.is_empty() {
        let log_path = args.out.join("failures.log");
        std::fs::write(&log_path, failures.join("\n") + "\n")?;
        for f in &failures {
            log::error!("extract failed: {f}");
        }
        recorder.record_output(&log_path);
    }
    if ok.is_empty() {
        return Err(CliError::Runtime(format!(
            "all {} tracks failed feature extraction",
            records.len()
        )));
    }
    let manifest_out = args.out.join("manifest.jsonl");
    save_manifest(&manifest_out, &ok)?;
    recorder.record_output(&manifest_out);
    recorder.record_output(&features_dir);
    recorder.write(&args.out)?;
    log::info!(
        "extracted {} of {} tracks into {}",
        ok.len(),
        records.len(),
        features_dir.display()
    );
    Ok(())
}
