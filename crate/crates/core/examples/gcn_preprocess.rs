//! Load a 16-bit scan, apply global contrast normalization, and resize it to
//! the model input size.
//!
//! cargo run --example gcn_preprocess

use segkit::data::{gcn_normalize, load_image, resize_bilinear, GcnParams};
use segkit::synth::{generate_dataset, SynthConfig};

fn summary(name: &str, v: &[f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    println!("{name:<22} mean {mean:>10.4}  rms {rms:>10.4}  range [{lo:.4}, {hi:.4}]");
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = SynthConfig {
        cases: 1,
        slices_per_day: 1,
        height: 96,
        width: 80,
        ..SynthConfig::default()
    };
    let data = generate_dataset(dir.path(), &cfg, false).expect("synthetic scan");
    let img = load_image(&data.files[1]).expect("readable scan");
    println!("{} ({}x{})", data.files[1].display(), img.height, img.width);

    let raw = img.to_f64();
    summary("raw", &raw);
    let plain = gcn_normalize(&raw, &GcnParams::default()).unwrap();
    summary("gcn", &plain);
    let centered = gcn_normalize(
        &raw,
        &GcnParams {
            subtract_mean: true,
            ..GcnParams::default()
        },
    )
    .unwrap();
    summary("gcn (mean removed)", &centered);

    let resized = resize_bilinear(&plain, img.height, img.width, 64, 64);
    summary("gcn, 64x64 bilinear", &resized);
}
