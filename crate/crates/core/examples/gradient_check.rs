//! Finite-difference check of every tape op and of the full model loss.
//!
//! cargo run --release --example gradient_check [-- levit128s unet 32]

use std::time::Instant;

use segkit::cli::{gradcheck_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};
use segkit::train::TrainConfig;

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::default();
    if let Some(e) = args.next() {
        cfg.encoder = e.parse().expect("encoder name");
    }
    if let Some(d) = args.next() {
        cfg.decoder = d.parse().expect("decoder name");
    }
    if let Some(s) = args.next() {
        cfg.image_size = s.parse().expect("image size");
    }
    cfg.validate().expect("valid config");

    let t = Instant::now();
    let lines = gradcheck_suite(&cfg, 1e-5).expect("suite runs");
    println!("ops tolerance {OP_TOLERANCE:e}, model tolerance {END_TO_END_TOLERANCE:e}");
    for l in &lines {
        let mark = if l.passes() { "ok  " } else { "FAIL" };
        println!("{mark} {:<6} {:<48} {:.2e}", l.kind, l.name, l.max_rel_error);
    }
    let failed = lines.iter().filter(|l| !l.passes()).count();
    println!(
        "{} checks, {failed} failed in {:.1}s",
        lines.len(),
        t.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(4);
    }
}
