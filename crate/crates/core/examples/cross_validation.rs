//! Stratified, case-grouped K-fold cross-validation on synthetic data, with
//! metrics CSVs, curves and a per-fold report.
//!
//! cargo run --release --example cross_validation [-- OUT_DIR]

use std::path::PathBuf;

use segkit::data::parse_metadata;
use segkit::model::Variant;
use segkit::synth::{generate_dataset, SynthConfig};
use segkit::train::{cross_validate, curve_charts, load_samples, organ_histogram, stratified_group_kfold, TrainConfig};

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().join("cv"));
    let data = tmp.path().join("data");
    let summary = generate_dataset(
        &data,
        &SynthConfig {
            cases: 12,
            height: 32,
            width: 32,
            ..SynthConfig::default()
        },
        false,
    )
    .unwrap();
    let records = parse_metadata(&summary.metadata).unwrap();

    let cfg = TrainConfig {
        encoder: Variant::Levit128s,
        image_size: 32,
        epochs: 4,
        folds: 3,
        lr_init: 5e-3,
        ..TrainConfig::default()
    };
    let folds = stratified_group_kfold(&records, cfg.folds, cfg.seed).unwrap();
    for k in 0..cfg.folds {
        let (_, valid) = folds.split(&records, k);
        let h = organ_histogram(valid.iter().map(|&i| &records[i]));
        println!("fold {k}: cases {:?}, organ counts {h:?}", folds.cases_in(k));
    }

    let samples = load_samples(&records, &cfg).unwrap();
    let report = cross_validate(&records, &samples, &cfg, Some(&out), 1).unwrap();
    for (name, svg) in curve_charts(&report.epochs) {
        std::fs::write(out.join(name), svg).unwrap();
    }
    print!("{}", report.summary_csv());
    println!("artifacts in {}", out.display());
}
