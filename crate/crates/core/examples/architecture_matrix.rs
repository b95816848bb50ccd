//! Build every encoder × decoder combination, report parameter counts, and
//! train each briefly on the same synthetic set.
//!
//! cargo run --release --example architecture_matrix [-- EPOCHS]

use std::time::Instant;

use segkit::data::parse_metadata;
use segkit::model::{DecoderKind, SegModel, Variant};
use segkit::synth::{generate_dataset, SynthConfig};
use segkit::train::{load_samples, train_model, TrainConfig};

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("epoch count"))
        .unwrap_or(3);
    let dir = tempfile::tempdir().expect("temp dir");
    let summary = generate_dataset(dir.path(), &SynthConfig::default(), false).unwrap();
    let records = parse_metadata(&summary.metadata).unwrap();

    println!("encoder     decoder  trainable  final_train_loss  seconds");
    for v in Variant::ALL {
        for d in DecoderKind::ALL {
            let cfg = TrainConfig {
                encoder: v,
                decoder: d,
                epochs,
                ..TrainConfig::default()
            };
            let params = SegModel::build(cfg.model_config(), cfg.seed).unwrap().trainable_count();
            let samples = load_samples(&records, &cfg).unwrap();
            let refs: Vec<_> = samples.iter().collect();
            let t = Instant::now();
            let run = train_model(&refs, &refs, 0, &cfg, None).unwrap();
            let last = run.epochs.last().unwrap();
            println!(
                "{:<11} {:<8} {:>9}  {:>16.5}  {:>7.1}",
                v.name(),
                d.name(),
                params,
                last.train_loss,
                t.elapsed().as_secs_f64()
            );
        }
    }
}
