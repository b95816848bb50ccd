//! Train briefly, save and reload a checkpoint, then write an RLE submission
//! table and check it decodes back to the predicted masks.
//!
//! cargo run --release --example predict_submission

use segkit::data::{decode_rle, parse_metadata};
use segkit::model::{load_checkpoint, param_manifest, save_checkpoint, Variant};
use segkit::synth::{generate_dataset, SynthConfig};
use segkit::train::{load_samples, predict_masks, submission_csv, train_model, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("data");
    let summary = generate_dataset(
        &data,
        &SynthConfig {
            cases: 2,
            height: 48,
            width: 40,
            ..SynthConfig::default()
        },
        false,
    )
    .unwrap();
    let records = parse_metadata(&summary.metadata).unwrap();
    let cfg = TrainConfig {
        encoder: Variant::Levit128s,
        image_size: 32,
        epochs: 6,
        lr_init: 1e-2,
        ..TrainConfig::default()
    };
    let samples = load_samples(&records, &cfg).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let run = train_model(&refs, &refs, 0, &cfg, None).unwrap();

    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &run.best_model).unwrap();
    let model = load_checkpoint(&ckpt).unwrap();
    let manifest = param_manifest(&model);
    for line in manifest.lines().rev().take(2) {
        println!("{line}");
    }

    let preds = predict_masks(&model, &refs, cfg.threshold, cfg.valid_batch).unwrap();
    let table = submission_csv(&preds);
    for line in table.lines().take(7) {
        println!("{line}");
    }
    for (line, (_, masks)) in table.lines().skip(1).step_by(3).zip(&preds) {
        let rle = line.splitn(3, ',').nth(2).unwrap();
        assert_eq!(decode_rle(rle, 48, 40).unwrap(), masks[0]);
    }
    println!("{} rows decode back to the predicted masks", preds.len() * 3);
}
