//! The `segkit` command line: argument parsing, config overrides, run
//! manifests and exit codes.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (unreadable or malformed inputs, I/O failures), 4 numeric failure (a
//! non-finite loss or gradient, or a failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{parse_metadata, DataError, SliceRecord};
use crate::eda;
use crate::model::{load_checkpoint, save_checkpoint, DecoderKind, Mode, ModelError, SegModel, Variant};
use crate::synth::{generate_dataset, SynthConfig};
use crate::tensor::{op_suite, Tensor, TensorError};
use crate::train::{
    cross_validate, curve_charts, default_probe_params, evaluate, load_samples, organ_histogram, predict_masks,
    probe_gradients, stratified_group_kfold, submission_csv, train_fold, TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Finite-difference tolerances used by `gradcheck`.
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::Tensor(_) | TrainError::NonFinite(_) => CliError::Numeric(e.to_string()),
            TrainError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "segkit",
    version,
    about = "Multi-organ segmentation with a LeViT encoder and UNet++ decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset of geometric organs.
    Synth(SynthArgs),
    /// Dataset statistics: organ counts, mask areas, intensity ratios.
    Eda(EdaArgs),
    /// Assign cases to stratified folds.
    Split(RunArgs),
    /// Train one fold and keep its best checkpoint.
    Train(TrainArgs),
    /// K-fold cross-validation.
    Cv(RunArgs),
    /// Score a checkpoint on a dataset or one fold of it.
    Evaluate(EvalArgs),
    /// Write an RLE submission table for a dataset.
    Predict(PredictArgs),
    /// Finite-difference check of every op and of the full model's loss.
    Gradcheck(GradArgs),
}

/// Values that override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Flat TOML config; flags below take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for model init, shuffling and fold assignment.
    #[arg(long)]
    pub seed: Option<u64>,
    /// levit128s, levit192 or levit384.
    #[arg(long)]
    pub encoder: Option<Variant>,
    /// unetpp or unet.
    #[arg(long)]
    pub decoder: Option<DecoderKind>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Epochs per fold.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Square model input side; a multiple of 32.
    #[arg(long)]
    pub image_size: Option<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.encoder {
            cfg.encoder = v;
        }
        if let Some(v) = self.decoder {
            cfg.decoder = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.image_size {
            cfg.image_size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for `train.csv` and the scans.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 8)]
    pub cases: u32,
    /// Scan days per case.
    #[arg(long, default_value_t = 1)]
    pub days: u32,
    /// Slices per scan day.
    #[arg(long, default_value_t = 4)]
    pub slices: u32,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EdaArgs {
    /// Dataset directory holding `train.csv`, or the CSV itself.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Dataset directory holding `train.csv`, or the CSV itself.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; must be empty unless `--force`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Folds trained concurrently (`cv` only).
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write into a non-empty `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fold held out for validation.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score only the validation part of this fold (split from `--folds`
    /// and `--seed`); all records otherwise.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Also write `evaluation.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Also write `gradcheck.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// What a command did, written as `manifest.json` in its output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub wall_clock_secs: f64,
    /// Every file under `out` except the manifest, sorted by path.
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Serialize, PartialEq, Eq)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checksums of every file under `dir` (recursively), excluding the
/// manifest itself.
pub fn list_artifacts(dir: &Path) -> Result<Vec<Artifact>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<Artifact>) -> Result<(), CliError> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
                continue;
            }
            let rel: Vec<String> = p
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let rel = rel.join("/");
            if rel == MANIFEST_NAME || rel.ends_with(".tmp") {
                continue;
            }
            let bytes = fs::metadata(&p).map_err(|e| io_err(&p, e))?.len();
            out.push(Artifact {
                sha256: sha256_file(&p)?,
                path: rel,
                bytes,
            });
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Writes `text` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, text: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    started: Instant,
    config: Option<TrainConfig>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn finish(self, out: &Path) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: self.command.into(),
            args: self.args,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            out: out.to_path_buf(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            artifacts: list_artifacts(out)?,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(&out.join(MANIFEST_NAME), &json)?;
        Ok(manifest)
    }
}

/// Creates `out`, refusing a non-empty directory unless `force`. The output
/// may not be the dataset directory itself.
fn prepare_out(out: &Path, data: Option<&Path>, force: bool) -> Result<(), CliError> {
    if let Some(data) = data {
        let root = data_root(data);
        if let (Ok(a), Ok(b)) = (fs::canonicalize(out), fs::canonicalize(&root)) {
            if a == b {
                return Err(CliError::Usage(format!(
                    "--out {} is the input dataset directory",
                    out.display()
                )));
            }
        }
    }
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(CliError::Usage(format!(
            "{} is not empty (pass --force to overwrite)",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn data_root(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.to_path_buf()
    } else {
        data.parent().unwrap_or(Path::new(".")).to_path_buf()
    }
}

/// `--data` is either the metadata CSV or a directory holding `train.csv`.
pub fn load_records(data: &Path) -> Result<Vec<SliceRecord>, CliError> {
    let csv = if data.is_dir() {
        data.join("train.csv")
    } else {
        data.to_path_buf()
    };
    if !csv.is_file() {
        return Err(CliError::Data(format!("no metadata CSV at {}", csv.display())));
    }
    let records = parse_metadata(&csv)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} lists no slices", csv.display())));
    }
    Ok(records)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_curves(out: &Path, rows: &[crate::train::EpochMetrics]) -> Result<(), CliError> {
    for (name, svg) in curve_charts(rows) {
        write(&out.join(name), svg)?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, run: Run) -> Result<(), CliError> {
    let cfg = SynthConfig {
        cases: a.cases,
        days_per_case: a.days,
        slices_per_day: a.slices,
        height: a.image_size,
        width: a.image_size,
        seed: a.seed,
    };
    let occupied = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !a.force {
        return Err(CliError::Usage(format!(
            "{} is not empty (pass --force to overwrite)",
            a.out.display()
        )));
    }
    let summary = generate_dataset(&a.out, &cfg, a.force)?;
    info!(
        "wrote {} slices to {} (organ-count histogram {:?})",
        summary.files.len() - 1,
        a.out.display(),
        summary.organ_hist
    );
    let _ = fs::remove_file(a.out.join(MANIFEST_NAME));
    Run {
        seed: Some(a.seed),
        ..run
    }
    .finish(&a.out)?;
    Ok(())
}

fn cmd_eda(a: &EdaArgs, run: Run) -> Result<(), CliError> {
    let records = load_records(&a.data)?;
    prepare_out(&a.out, Some(&a.data), a.force)?;
    let stats = eda::collect_stats(&records)?;
    eda::emit_report(&stats, &a.out)?;
    println!("slices: {}", records.len());
    println!("organs per slice (0/1/2/3): {:?}", stats.organ_count_hist);
    println!(
        "masks per class (large_bowel/small_bowel/stomach): {:?}",
        stats.class_presence
    );
    run.finish(&a.out)?;
    Ok(())
}

fn cmd_split(a: &RunArgs, run: Run) -> Result<(), CliError> {
    let cfg = a.overrides.resolve()?;
    let records = load_records(&a.data)?;
    prepare_out(&a.out, Some(&a.data), a.force)?;
    let folds = stratified_group_kfold(&records, cfg.folds, cfg.seed)?;
    let mut assignment = String::from("case,fold\n");
    for (case, fold) in &folds.folds {
        let _ = writeln!(assignment, "{case},{fold}");
    }
    write(&a.out.join("folds.csv"), assignment)?;
    let mut summary = String::from("fold,cases,slices,organs0,organs1,organs2,organs3\n");
    for k in 0..folds.k {
        let (_, valid) = folds.split(&records, k);
        let h = organ_histogram(valid.iter().map(|&i| &records[i]));
        let _ = writeln!(
            summary,
            "{k},{},{},{},{},{},{}",
            folds.cases_in(k).len(),
            valid.len(),
            h[0],
            h[1],
            h[2],
            h[3]
        );
    }
    print!("{summary}");
    write(&a.out.join("split_summary.csv"), summary)?;
    Run {
        seed: Some(cfg.seed),
        config: Some(cfg),
        ..run
    }
    .finish(&a.out)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, run: Run) -> Result<(), CliError> {
    let cfg = a.run.overrides.resolve()?;
    if a.fold >= cfg.folds {
        return Err(CliError::Usage(format!(
            "--fold {} out of range for {} folds",
            a.fold, cfg.folds
        )));
    }
    let records = load_records(&a.run.data)?;
    prepare_out(&a.run.out, Some(&a.run.data), a.run.force)?;
    write(&a.run.out.join("config.toml"), cfg.to_toml())?;
    let samples = load_samples(&records, &cfg)?;
    let folds = stratified_group_kfold(&records, cfg.folds, cfg.seed)?;
    let fold = train_fold(&records, &samples, &folds, a.fold, &cfg, Some(&a.run.out))?;
    save_checkpoint(&a.run.out.join("final.ckpt"), &fold.final_model)?;
    write_curves(&a.run.out, &fold.epochs)?;
    let best = &fold.epochs[fold.best_epoch];
    println!("{}", crate::train::METRICS_HEADER);
    println!("{}", best.csv_row());
    Run {
        seed: Some(cfg.seed),
        config: Some(cfg),
        ..run
    }
    .finish(&a.run.out)?;
    Ok(())
}

fn cmd_cv(a: &RunArgs, run: Run) -> Result<(), CliError> {
    let cfg = a.overrides.resolve()?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let records = load_records(&a.data)?;
    prepare_out(&a.out, Some(&a.data), a.force)?;
    write(&a.out.join("config.toml"), cfg.to_toml())?;
    let samples = load_samples(&records, &cfg)?;
    let report = cross_validate(&records, &samples, &cfg, Some(&a.out), a.jobs)?;
    write_curves(&a.out, &report.epochs)?;
    print!("{}", report.summary_csv());
    Run {
        seed: Some(cfg.seed),
        config: Some(cfg),
        ..run
    }
    .finish(&a.out)?;
    Ok(())
}

/// The run config with model fields taken from the checkpoint.
fn config_for(model: &SegModel, overrides: &Overrides) -> Result<TrainConfig, CliError> {
    let mut cfg = match &overrides.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = overrides.seed {
        cfg.seed = v;
    }
    if let Some(v) = overrides.folds {
        cfg.folds = v;
    }
    let (h, w) = model.config.input_size;
    if h != w {
        return Err(CliError::Usage(format!("checkpoint input {h}x{w} is not square")));
    }
    cfg.encoder = model.config.variant;
    cfg.decoder = model.config.decoder;
    cfg.image_size = h;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_evaluate(a: &EvalArgs, run: Run) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let cfg = config_for(&model, &a.overrides)?;
    let records = load_records(&a.data)?;
    let samples = load_samples(&records, &cfg)?;
    let chosen: Vec<&crate::data::Sample> = match a.fold {
        Some(k) => {
            if k >= cfg.folds {
                return Err(CliError::Usage(format!(
                    "--fold {k} out of range for {} folds",
                    cfg.folds
                )));
            }
            let folds = stratified_group_kfold(&records, cfg.folds, cfg.seed)?;
            folds.split(&records, k).1.iter().map(|&i| &samples[i]).collect()
        }
        None => samples.iter().collect(),
    };
    let ev = evaluate(&model, &chosen, &cfg)?;
    let mut table = String::from("metric,large_bowel,small_bowel,stomach,mean\n");
    for (name, s) in [("dice", ev.dice), ("jaccard", ev.jaccard)] {
        let _ = writeln!(
            table,
            "{name},{},{},{},{}",
            crate::train::format_g(s.per_class[0]),
            crate::train::format_g(s.per_class[1]),
            crate::train::format_g(s.per_class[2]),
            crate::train::format_g(s.mean)
        );
    }
    print!("{table}");
    println!("samples: {}  loss: {}", chosen.len(), crate::train::format_g(ev.loss));
    if let Some(out) = &a.out {
        prepare_out(out, Some(&a.data), a.force)?;
        write(&out.join("evaluation.csv"), table)?;
        Run {
            seed: Some(cfg.seed),
            config: Some(cfg),
            inputs: vec![a.checkpoint.clone(), a.data.clone()],
            ..run
        }
        .finish(out)?;
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, run: Run) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let cfg = config_for(&model, &a.overrides)?;
    let records = load_records(&a.data)?;
    prepare_out(&a.out, Some(&a.data), a.force)?;
    let samples = load_samples(&records, &cfg)?;
    let refs: Vec<_> = samples.iter().collect();
    let preds = predict_masks(&model, &refs, cfg.threshold, cfg.valid_batch)?;
    write(&a.out.join("submission.csv"), submission_csv(&preds))?;
    info!("wrote {} predictions", preds.len() * 3);
    Run {
        seed: Some(cfg.seed),
        config: Some(cfg),
        inputs: vec![a.checkpoint.clone(), a.data.clone()],
        ..run
    }
    .finish(&a.out)?;
    Ok(())
}

/// One line of the gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct GradLine {
    pub kind: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradLine {
    pub fn passes(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Every op, then the full model's loss with respect to a spread of its
/// parameters, on random inputs drawn from `cfg.seed`. The model probes run
/// with batch norm on its running statistics; training-mode batch norm is
/// covered by the op checks.
pub fn gradcheck_suite(cfg: &TrainConfig, step: f64) -> Result<Vec<GradLine>, CliError> {
    let mut lines: Vec<GradLine> = op_suite(step)?
        .into_iter()
        .map(|(name, r)| GradLine {
            kind: "op",
            name: name.into(),
            max_rel_error: r.max_rel_error,
            tolerance: OP_TOLERANCE,
        })
        .collect();
    let model = SegModel::build(cfg.model_config(), cfg.seed)?;
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images = Tensor::new(
        &[2, 1, s, s],
        (0..2 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let targets = Tensor::new(
        &[2, 3, s, s],
        (0..6 * s * s)
            .map(|_| f64::from(rng.random_range(0..4u8) == 0))
            .collect(),
    )?;
    let params = default_probe_params(&model);
    for r in probe_gradients(&model, &images, &targets, cfg, &params, step, Mode::Eval)? {
        lines.push(GradLine {
            kind: "model",
            name: format!("{}[{}]", r.name, r.elem),
            max_rel_error: r.rel_error,
            tolerance: END_TO_END_TOLERANCE,
        });
    }
    Ok(lines)
}

fn cmd_gradcheck(a: &GradArgs, run: Run) -> Result<(), CliError> {
    let cfg = a.overrides.resolve()?;
    let started = Instant::now();
    let lines = gradcheck_suite(&cfg, a.step)?;
    let mut table = String::from("kind,name,max_rel_error,tolerance,status\n");
    for l in &lines {
        let status = if l.passes() { "pass" } else { "FAIL" };
        let _ = writeln!(
            table,
            "{},{},{:.3e},{:.0e},{status}",
            l.kind, l.name, l.max_rel_error, l.tolerance
        );
    }
    print!("{table}");
    let failed = lines.iter().filter(|l| !l.passes()).count();
    println!(
        "{} checks, {failed} failed, {:.1}s ({} + {} at {}x{})",
        lines.len(),
        started.elapsed().as_secs_f64(),
        cfg.encoder,
        cfg.decoder,
        cfg.image_size,
        cfg.image_size
    );
    if let Some(out) = &a.out {
        prepare_out(out, None, a.force)?;
        write(&out.join("gradcheck.csv"), &table)?;
        Run {
            seed: Some(cfg.seed),
            config: Some(cfg.clone()),
            ..run
        }
        .finish(out)?;
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} gradient checks exceeded tolerance"
        )));
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, args: Vec<String>) -> Result<(), CliError> {
    let run = |command: &'static str, inputs: Vec<PathBuf>| Run {
        command,
        args: args.clone(),
        started: Instant::now(),
        config: None,
        seed: None,
        inputs,
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, run("synth", vec![])),
        Command::Eda(a) => cmd_eda(a, run("eda", vec![a.data.clone()])),
        Command::Split(a) => cmd_split(a, run("split", vec![a.data.clone()])),
        Command::Train(a) => cmd_train(a, run("train", vec![a.run.data.clone()])),
        Command::Cv(a) => cmd_cv(a, run("cv", vec![a.data.clone()])),
        Command::Evaluate(a) => cmd_evaluate(a, run("evaluate", vec![])),
        Command::Predict(a) => cmd_predict(a, run("predict", vec![])),
        Command::Gradcheck(a) => cmd_gradcheck(a, run("gradcheck", vec![])),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Logging goes to stderr at the level in `SEGKIT_LOG`
/// (default `info`).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEGKIT_LOG", "info")).try_init();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let echo = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, echo) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
