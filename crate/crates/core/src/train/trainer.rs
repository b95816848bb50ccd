use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{assemble_sample, samples_to_batch, Sample, SliceRecord};
use crate::metrics::{ScoreAccumulator, SegScore};
use crate::model::{save_checkpoint, Ctx, Mode, SegModel};
use crate::tensor::Tape;

use super::{
    best_per_fold, composite_loss, cosine_annealing_lr, metrics_csv, stratified_group_kfold, Adam, EpochMetrics,
    FoldAssignment, TrainConfig, TrainError, METRICS_HEADER,
};

/// Loads every record at the configured size.
pub fn load_samples(records: &[SliceRecord], cfg: &TrainConfig) -> Result<Vec<Sample>, TrainError> {
    let gcn = cfg.gcn();
    records
        .iter()
        .map(|r| Ok(assemble_sample(r, (cfg.image_size, cfg.image_size), &gcn)?))
        .collect()
}

/// Model-init and shuffling seed for one fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Eval-mode loss terms and thresholded scores over `samples`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub bce: f64,
    pub soft_dice: f64,
    pub dice: SegScore,
    pub jaccard: SegScore,
}

pub fn evaluate(model: &SegModel, samples: &[&Sample], cfg: &TrainConfig) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    let mut acc = ScoreAccumulator::default();
    let (mut loss, mut bce, mut soft_dice) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(cfg.valid_batch) {
        let (images, targets) = samples_to_batch(chunk);
        let targets = Arc::new(targets);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, Mode::Eval);
        let out = model.forward(&ctx, tape.constant(images))?;
        let terms = composite_loss(out.probs, &targets, cfg)?;
        let w = chunk.len() as f64;
        loss += w * terms.total.value().data()[0];
        bce += w * terms.bce.value().data()[0];
        soft_dice += w * terms.soft_dice.value().data()[0];
        acc.add(&out.probs.value(), &targets, cfg.threshold)
            .expect("model output matches target shape");
    }
    let n = samples.len() as f64;
    let (dice, jaccard) = acc.finish();
    Ok(Evaluation {
        loss: loss / n,
        bce: bce / n,
        soft_dice: soft_dice / n,
        dice,
        jaccard,
    })
}

/// Result of training one fold.
pub struct FoldRun {
    pub fold: usize,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Parameters from the best-valid-dice epoch.
    pub best_model: SegModel,
    pub final_model: SegModel,
}

/// Trains a fresh model on `train`, scoring `valid` after every epoch.
///
/// With `out`, per-epoch rows are appended to `out/metrics.csv` as they are
/// produced and the best model is written to `out/best.ckpt`.
pub fn train_model(
    train: &[&Sample],
    valid: &[&Sample],
    fold: usize,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<FoldRun, TrainError> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::Config(format!(
            "fold {fold}: empty split ({} train / {} valid samples)",
            train.len(),
            valid.len()
        )));
    }
    let seed = fold_seed(cfg.seed, fold);
    let mut model = SegModel::build(cfg.model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = fs::File::create(&path).map_err(|e| TrainError::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| TrainError::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, SegModel)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cosine_annealing_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.train_batch).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let (images, targets) = samples_to_batch(&batch);
            let targets = Arc::new(targets);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store, Mode::Train);
            let out = model.forward(&ctx, tape.constant(images))?;
            let loss = composite_loss(out.probs, &targets, cfg)?.total;
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite(format!(
                    "loss is {value} at fold {fold}, epoch {epoch}, batch {b}"
                )));
            }
            let grads = tape.backward(loss)?;
            let grads = Adam::collect(&model.store, &grads);
            let stats = ctx.finish();
            drop(tape);
            model.store.apply_bn_updates(stats, cfg.bn_momentum);
            adam.step(&mut model.store, &grads, lr)
                .map_err(|e| TrainError::NonFinite(format!("fold {fold}, epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += value * batch.len() as f64;
        }
        let eval = evaluate(&model, valid, cfg)?;
        let row = EpochMetrics {
            fold,
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_loss: eval.loss,
            valid_dice: eval.dice.mean,
            valid_jaccard: eval.jaccard.mean,
            lr,
        };
        info!(
            "fold {fold} epoch {epoch}: train_loss {:.5} valid_loss {:.5} dice {:.5} jaccard {:.5} lr {:.3e}",
            row.train_loss, row.valid_loss, row.valid_dice, row.valid_jaccard, lr
        );
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", row.csv_row()).map_err(|e| TrainError::io(&*path, e))?;
        }
        if best.as_ref().is_none_or(|(_, d, _)| row.valid_dice > *d) {
            best = Some((epoch, row.valid_dice, model.clone()));
        }
        epochs.push(row);
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch");
    if let Some(dir) = out {
        save_checkpoint(&dir.join("best.ckpt"), &best_model)?;
    }
    Ok(FoldRun {
        fold,
        epochs,
        best_epoch,
        best_model,
        final_model: model,
    })
}

/// Trains on every fold but `fold`, validating on `fold`.
pub fn train_fold(
    records: &[SliceRecord],
    samples: &[Sample],
    folds: &FoldAssignment,
    fold: usize,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<FoldRun, TrainError> {
    if fold >= folds.k {
        return Err(TrainError::Config(format!(
            "fold {fold} out of range for K = {}",
            folds.k
        )));
    }
    let (train_idx, valid_idx) = folds.split(records, fold);
    let train: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let valid: Vec<&Sample> = valid_idx.iter().map(|&i| &samples[i]).collect();
    train_model(&train, &valid, fold, cfg, out)
}

/// All epochs of all folds plus the best epoch of each fold.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: FoldAssignment,
    pub epochs: Vec<EpochMetrics>,
    pub best: Vec<EpochMetrics>,
}

impl CvReport {
    /// One row per fold, same columns as the metrics CSV.
    pub fn summary_csv(&self) -> String {
        metrics_csv(&self.best)
    }
}

/// Runs every fold, `jobs` at a time on separate threads. With `out`, fold
/// `k` writes under `out/fold{k}/`, and `out/metrics.csv` (all epochs) and
/// `out/cv_report.csv` (best epoch per fold) are written at the end.
pub fn cross_validate(
    records: &[SliceRecord],
    samples: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
    jobs: usize,
) -> Result<CvReport, TrainError> {
    cfg.validate()?;
    let folds = stratified_group_kfold(records, cfg.folds, cfg.seed)?;
    let jobs = jobs.clamp(1, cfg.folds);
    let run = |fold: usize| -> Result<Vec<EpochMetrics>, TrainError> {
        let dir = out.map(|o| o.join(format!("fold{fold}")));
        Ok(train_fold(records, samples, &folds, fold, cfg, dir.as_deref())?.epochs)
    };
    let mut epochs = Vec::new();
    let all: Vec<usize> = (0..cfg.folds).collect();
    for wave in all.chunks(jobs) {
        let results: Vec<Result<Vec<EpochMetrics>, TrainError>> = if wave.len() == 1 {
            vec![run(wave[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|&f| s.spawn(move || run(f))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("fold worker panicked"))
                    .collect()
            })
        };
        for r in results {
            epochs.extend(r?);
        }
    }
    let best = best_per_fold(&epochs);
    let report = CvReport { folds, epochs, best };
    if let Some(dir) = out {
        for (name, text) in [
            ("metrics.csv", metrics_csv(&report.epochs)),
            ("cv_report.csv", report.summary_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| TrainError::io(&path, e))?;
        }
    }
    Ok(report)
}
