// overfit probe: 50-track memorization for all three variants
use era_forge::data::{generate_synthetic, SyntheticSpec};
use era_forge::metrics::{evaluate, EvalProtocol, Granularity, LabelSpace};
use era_forge::models::{AudioEncoderConfig, FusionConfig, ModelConfig, Variant};
use era_forge::train::{train_run, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let ds = generate_synthetic(&SyntheticSpec {
        n_tracks: 50,
        n_artists: 10,
        seed: 5,
        noise: 0.15,
        n_mels: 32,
        n_frames: 128,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let space = LabelSpace { granularity: Granularity::Year, base_year: 1947, n_classes: 64 };
    let pool: Vec<usize> = (0..ds.len()).collect();
    for variant in [Variant::AudioartMmc] {
        let mut mc = ModelConfig::new(
            variant,
            AudioEncoderConfig { n_mels: 32, block_channels: vec![12, 24, 48], embed_dim: 48, n_classes: 64 },
        );
        mc.fusion = FusionConfig { n_blocks: 2, heads: 4, d_k: 24 };
        mc.d_z = 16;
        if variant == Variant::AudioartMmc { mc.bio_dim = 16; }
        let cfg = TrainConfig {
            epochs,
            lr,
            alpha: 0.05,
            beta: 1e-3,
            batch_size: 10,
            excerpt_frames: 64,
            k_negatives: 2,
            per_class: 2,
            val_excerpts: 2,
            early_stop_patience: epochs, // no early stop: pure memorization check
            ..TrainConfig::new(variant)
        };
        let t0 = Instant::now();
        // validation = training set so the best-training-accuracy snapshot is kept
        let (mut graph, out) = train_run(&mc, &cfg, &ds, &pool, &pool, &space).unwrap();
        let report = evaluate(&mut graph, &ds, &pool, &space, &EvalProtocol {
            excerpts_per_track: 8, excerpt_frames: 64, seed: 7, pad_short: false,
        }).unwrap();
        println!(
            "{variant}: {:.0}s ep{} | train ACC0 {:.3} (val-curve best {:.3} at ep {})",
            t0.elapsed().as_secs_f64(), out.epochs_run, report.acc[&0], out.best_val_acc0, out.best_epoch,
        );
    }
}
