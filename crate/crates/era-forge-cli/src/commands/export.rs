//! export-embeddings: per-track embeddings in the keyed-vector format
//! (magic EMBD), averaged over excerpts.

use std::path::PathBuf;

use clap::Args;

use era_forge::data::write_keyed_vectors;
use era_forge::dsp::{sample_excerpt_or_pad, sample_excerpt_with, DspConfig};
use era_forge::models::{EmbeddingLayer, ModelGraph};
use era_forge::nncore::Tensor;

use super::evaluate_cmd::space_from_header;
use super::{in_span_indices, load_dataset, require_exists};
use crate::config::FileConfig;
use crate::run_manifest::RunRecorder;
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bios: Option<PathBuf>,
    /// Which embedding to export: h_a, h_m, or z
    #[arg(long)]
    pub layer: String,
    /// Output file (EMBD keyed-vector table)
    #[arg(long)]
    pub out: PathBuf,
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

pub fn run(args: ExportArgs) -> CliResult {
    let file_cfg = FileConfig::load(args.config.as_deref())?;
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.manifest, "manifest")?;
    let layer: EmbeddingLayer = args
        .layer
        .parse()
        .map_err(|e: era_forge::Error| CliError::Usage(e.to_string()))?;
    let (mut graph, train_header) = ModelGraph::load(&args.checkpoint)?;
    let space = space_from_header(&train_header)?;
    let default_frames = train_header["train"]["excerpt_frames"].as_u64().unwrap_or(1024) as usize;
    let excerpts = file_cfg.resolve(args.excerpts, "excerpts", 8).max(1);
    let excerpt_frames = file_cfg.resolve(args.excerpt_frames, "excerpt-frames", default_frames);
    let seed = file_cfg.resolve(args.seed, "seed", 0);
    let pad_short = args.pad_short || file_cfg.get("pad-short").unwrap_or(false);

    let ds = load_dataset(&args.manifest, args.bios.as_deref(), &DspConfig::default())?;
    let mut indices = in_span_indices(&ds, &space);
    if graph.config.variant.needs_bios() {
        indices.retain(|&i| ds.bio_vector(i).is_some());
    }
    if indices.is_empty() {
        return Err(CliError::Runtime("no exportable tracks after filtering".into()));
    }

    let mut recorder = RunRecorder::new(
        "export-embeddings",
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "layer": args.layer,
            "excerpts": excerpts,
            "excerpt_frames": excerpt_frames,
            "seed": seed,
        }),
    );
    recorder.record_input(&args.checkpoint)?;
    recorder.record_input(&args.manifest)?;

    let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let m = ds.feature(idx)?;
        let mut rng = rand_seed(seed, idx);
        let plane = m.n_mels * excerpt_frames;
        let mut mel = Tensor::zeros(&[excerpts, 1, m.n_mels, excerpt_frames]);
        for row in 0..excerpts {
            let ex = if pad_short {
                sample_excerpt_or_pad(m, excerpt_frames, &mut rng)?
            } else {
                sample_excerpt_with(m, excerpt_frames, &mut rng)?
            };
            mel.values_mut()[row * plane..(row + 1) * plane].copy_from_slice(&ex.values);
        }
        let bios_tensor;
        let bios = if graph.config.variant.needs_bios() {
            let vec = ds.bio_vector(idx).expect("filtered above");
            let mut t = Tensor::zeros(&[excerpts, vec.len()]);
            for row in 0..excerpts {
                t.row_mut(row).copy_from_slice(vec);
            }
            bios_tensor = t;
            Some(&bios_tensor)
        } else {
            None
        };
        let emb = graph.embed(&mel, bios, layer)?;
        let d = emb.shape()[1];
        let mut mean = vec![0.0; d];
        for row in 0..excerpts {
            for (acc, &v) in mean.iter_mut().zip(emb.row(row)) {
                *acc += v / excerpts as f64;
            }
        }
        if layer == EmbeddingLayer::Z {
            // keep the unit-norm contract after averaging
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut mean {
                *v /= norm;
            }
        }
        rows.push((ds.records[idx].track_id.clone(), mean));
    }
    let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_keyed_vectors(&args.out, b"EMBD", dim, &rows)?;
    recorder.record_output(&args.out);
    recorder.write_to_file(&args.out.with_extension("run.json"))?;
    log::info!("exported {} embeddings ({}-d) to {}", rows.len(), dim, args.out.display());
    Ok(())
}

fn rand_seed(seed: u64, idx: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E3779B97F4A7C15))
}
