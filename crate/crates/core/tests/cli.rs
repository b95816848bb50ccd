use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segkit::cli::list_artifacts;
use segkit::data::{decode_rle, parse_metadata, Organ};
use segkit::model::load_checkpoint;
use segkit::train::{load_samples, predict_masks, TrainConfig};

fn segkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segkit"))
        .args(args)
        .env("SEGKIT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = segkit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    segkit(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "encoder = \"levit128s\"\nimage_size = 32\nepochs = 2\nlr_init = 0.005\nfolds = 2\n";

#[test]
fn synth_is_deterministic_and_refuses_to_clobber() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--out", p(&a), "--cases", "4", "--seed", "7"]);
    ok(&["synth", "--out", p(&b), "--cases", "4", "--seed", "7"]);
    assert_eq!(list_artifacts(&a).unwrap(), list_artifacts(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 17);

    assert_eq!(code(&["synth", "--out", p(&a), "--cases", "4"]), 2);
    ok(&["synth", "--out", p(&a), "--cases", "2", "--force"]);
    assert_eq!(parse_metadata(&a.join("train.csv")).unwrap().len(), 8);
}

#[test]
fn eda_writes_csvs_that_match_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("eda");
    ok(&["synth", "--out", p(&data), "--cases", "3"]);
    let stdout = ok(&["eda", "--data", p(&data), "--out", p(&out)]);
    assert!(stdout.contains("slices: 12"), "{stdout}");
    let hist = fs::read_to_string(out.join("organ_hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);
    let total: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 12);
    let intensity = fs::read_to_string(out.join("intensity.csv")).unwrap();
    assert_eq!(intensity.lines().count(), 13);
    for name in [
        "class_presence.csv",
        "mask_areas.csv",
        "organ_hist.svg",
        "mask_areas.svg",
        "manifest.json",
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }
    // a rerun renders the same charts byte for byte
    let again = dir.path().join("eda2");
    ok(&["eda", "--data", p(&data), "--out", p(&again)]);
    assert_eq!(
        fs::read(out.join("intensity.svg")).unwrap(),
        fs::read(again.join("intensity.svg")).unwrap()
    );
}

#[test]
fn split_train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_path = dir.path().join("small.toml");
    fs::write(&cfg_path, SMALL).unwrap();
    ok(&["synth", "--out", p(&data), "--cases", "4", "--image-size", "48"]);

    let split = dir.path().join("split");
    ok(&["split", "--data", p(&data), "--out", p(&split), "--folds", "2"]);
    assert_eq!(fs::read_to_string(split.join("folds.csv")).unwrap().lines().count(), 5);

    let run = dir.path().join("train");
    let stdout = ok(&[
        "train",
        "--config",
        p(&cfg_path),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--seed",
        "3",
    ]);
    assert!(stdout.starts_with("fold,epoch"), "{stdout}");
    for name in [
        "metrics.csv",
        "best.ckpt",
        "final.ckpt",
        "loss_curves.svg",
        "config.toml",
        "manifest.json",
    ] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let echoed = TrainConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!((echoed.seed, echoed.epochs), (3, 2));

    let ckpt = run.join("best.ckpt");
    let report = ok(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--fold",
        "1",
        "--folds",
        "2",
        "--seed",
        "3",
    ]);
    assert!(report.lines().any(|l| l.starts_with("dice,")), "{report}");

    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&pred),
    ]);
    let table = fs::read_to_string(pred.join("submission.csv")).unwrap();
    let mut rows = table.lines();
    assert_eq!(rows.next(), Some("id,class,predicted"));

    let model = load_checkpoint(&ckpt).unwrap();
    let records = parse_metadata(&data.join("train.csv")).unwrap();
    let samples = load_samples(&records, &echoed).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let expected = predict_masks(&model, &refs, echoed.threshold, 8).unwrap();
    let rows: Vec<&str> = rows.collect();
    assert_eq!(rows.len(), 3 * records.len());
    for (row, (id, masks)) in rows.chunks(3).zip(&expected) {
        for (line, organ) in row.iter().zip(Organ::ALL) {
            let cells: Vec<&str> = line.splitn(3, ',').collect();
            assert_eq!(cells[0], id.to_string());
            assert_eq!(cells[1], organ.label());
            let decoded = decode_rle(cells[2], 48, 48).unwrap();
            assert_eq!(decoded, masks[organ.index()]);
        }
    }
}

#[test]
fn cv_with_two_folds_reports_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_path = dir.path().join("small.toml");
    fs::write(&cfg_path, SMALL).unwrap();
    ok(&["synth", "--out", p(&data), "--cases", "4", "--image-size", "32"]);
    let out = dir.path().join("cv");
    let stdout = ok(&[
        "cv",
        "--config",
        p(&cfg_path),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--jobs",
        "2",
        "--epochs",
        "1",
    ]);
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    assert_eq!(fs::read_to_string(out.join("cv_report.csv")).unwrap(), stdout);
    assert!(out.join("fold1/best.ckpt").is_file());
    assert!(out.join("dice_curves.svg").is_file());
}

#[test]
fn gradcheck_passes_on_the_default_model() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("0 failed"), "{stdout}");
    assert!(stdout.contains("levit384 + unetpp"), "{stdout}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--data", "x"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["gradcheck", "--image-size", "60"]), 2);
    let missing = dir.path().join("missing");
    assert_eq!(
        code(&["eda", "--data", p(&missing), "--out", p(&dir.path().join("o"))]),
        3
    );
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--cases", "1"]);
    let pred = dir.path().join("pred");
    assert_eq!(
        code(&[
            "predict",
            "--checkpoint",
            p(&bad),
            "--data",
            p(&data),
            "--out",
            p(&pred)
        ]),
        3
    );
    assert_eq!(code(&["eda", "--data", p(&data), "--out", p(&data)]), 2);
}
