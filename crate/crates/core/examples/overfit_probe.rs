//! Memorize eight synthetic slices with the default LeViT-384 + UNet++ model
//! and report how close it gets.
//!
//! cargo run --release --example overfit_probe [-- SEED]

use std::time::Instant;

use segkit::data::parse_metadata;
use segkit::synth::{generate_dataset, SynthConfig};
use segkit::train::{evaluate, load_samples, metrics_csv, train_model, TrainConfig};

fn main() {
    let mut cfg = TrainConfig::overfit_probe();
    if let Some(s) = std::env::args().nth(1) {
        cfg.seed = s.parse().expect("seed");
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let summary = generate_dataset(
        dir.path(),
        &SynthConfig {
            cases: 2,
            ..SynthConfig::default()
        },
        false,
    )
    .unwrap();
    let records = parse_metadata(&summary.metadata).unwrap();
    let samples = load_samples(&records, &cfg).unwrap();
    let refs: Vec<_> = samples.iter().collect();

    let t = Instant::now();
    let run = train_model(&refs, &refs, 0, &cfg, None).unwrap();
    print!("{}", metrics_csv(&run.epochs));
    let ev = evaluate(&run.final_model, &refs, &cfg).unwrap();
    println!(
        "final model: soft-dice loss {:.4}, mean dice {:.4}, mean jaccard {:.4} ({:.0}s)",
        ev.soft_dice,
        ev.dice.mean,
        ev.jaccard.mean,
        t.elapsed().as_secs_f64()
    );
}
