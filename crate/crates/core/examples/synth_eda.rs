//! Generate a synthetic dataset and print its statistics.
//!
//! cargo run --example synth_eda [-- OUT_DIR]

use std::path::PathBuf;

use segkit::data::parse_metadata;
use segkit::eda::{collect_stats, emit_report, INTENSITY_THRESHOLDS};
use segkit::svg::quantiles;
use segkit::synth::{generate_dataset, SynthConfig};

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().join("eda"));
    let data = tmp.path().join("data");
    let cfg = SynthConfig {
        cases: 10,
        ..SynthConfig::default()
    };
    let summary = generate_dataset(&data, &cfg, false).expect("dataset");
    let records = parse_metadata(&summary.metadata).expect("metadata");
    let stats = collect_stats(&records).expect("stats");

    println!("{} slices", records.len());
    println!("organs per slice: {:?}", stats.organ_count_hist);
    println!(
        "annotated masks (large bowel, small bowel, stomach): {:?}",
        stats.class_presence
    );
    for (c, areas) in stats.area_samples.iter().enumerate() {
        let v: Vec<f64> = areas.iter().map(|a| a.1 as f64).collect();
        if let Some([lo, q1, med, q3, hi]) = quantiles(&v) {
            println!("class {c} area: min {lo} q1 {q1} median {med} q3 {q3} max {hi}");
        }
    }
    let (id, m) = &stats.intensity[0];
    println!("{id}: mean {:.1}, nonzero {:.3}", m.avg, m.ratio_nonzero);
    for (t, r) in INTENSITY_THRESHOLDS.iter().zip(m.ratio_larger) {
        println!("  > {t:<3} {r:.3}");
    }
    let written = emit_report(&stats, &out).expect("report");
    for p in written {
        println!("wrote {}", p.display());
    }
    if std::env::args().nth(1).is_none() {
        println!("(temporary directory; pass a path to keep the report)");
    }
}
