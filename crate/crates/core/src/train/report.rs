//! Metrics CSV rows and the per-fold summary.

use std::fmt::Write as _;

use crate::svg;

use super::TrainError;

pub const METRICS_HEADER: &str = "fold,epoch,train_loss,valid_loss,valid_dice,valid_jaccard,lr";

/// One epoch of one fold. `epoch` is the zero-based schedule step `t`, so
/// `lr == cosine_annealing_lr(epoch, epochs, ..)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_dice: f64,
    pub valid_jaccard: f64,
    pub lr: f64,
}

/// C-style `%g`: six significant digits, trailing zeros dropped, exponent
/// form below 1e-4 and from 1e6.
pub fn format_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.fold,
            self.epoch,
            format_g(self.train_loss),
            format_g(self.valid_loss),
            format_g(self.valid_dice),
            format_g(self.valid_jaccard),
            format_g(self.lr)
        )
    }

    pub fn parse_row(line: &str) -> Result<Self, TrainError> {
        let bad = || TrainError::Config(format!("malformed metrics row {line:?}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            fold: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            train_loss: num(2)?,
            valid_loss: num(3)?,
            valid_dice: num(4)?,
            valid_jaccard: num(5)?,
            lr: num(6)?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(TrainError::Config("metrics CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(EpochMetrics::parse_row)
        .collect()
}

/// The best-valid-dice epoch of each fold (earliest on ties), ordered by
/// fold. Its `lr` is the rate in force during that epoch.
pub fn best_per_fold(rows: &[EpochMetrics]) -> Vec<EpochMetrics> {
    let mut best: std::collections::BTreeMap<usize, EpochMetrics> = Default::default();
    for r in rows {
        best.entry(r.fold)
            .and_modify(|b| {
                if r.valid_dice > b.valid_dice || (r.valid_dice == b.valid_dice && r.epoch < b.epoch) {
                    *b = *r;
                }
            })
            .or_insert(*r);
    }
    best.into_values().collect()
}

/// Loss, dice and learning-rate curves per fold, as `(file name, svg)`.
pub fn curve_charts(rows: &[EpochMetrics]) -> [(&'static str, String); 3] {
    let mut folds: Vec<usize> = rows.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let series = |f: &dyn Fn(&EpochMetrics) -> f64, label: &str| -> Vec<(String, Vec<(f64, f64)>)> {
        folds
            .iter()
            .map(|&k| {
                let pts = rows
                    .iter()
                    .filter(|r| r.fold == k)
                    .map(|r| (r.epoch as f64, f(r)))
                    .collect();
                (format!("fold {k} {label}"), pts)
            })
            .collect()
    };
    let mut loss = series(&|r| r.train_loss, "train");
    loss.extend(series(&|r| r.valid_loss, "valid"));
    [
        (
            "loss_curves.svg",
            svg::line_chart("Loss per epoch", "epoch", "loss", &loss),
        ),
        (
            "dice_curves.svg",
            svg::line_chart(
                "Validation dice per epoch",
                "epoch",
                "dice",
                &series(&|r| r.valid_dice, "dice"),
            ),
        ),
        (
            "lr_curves.svg",
            svg::line_chart("Learning rate", "epoch", "lr", &series(&|r| r.lr, "lr")),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_like_printf_g() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.002, "0.002"),
            (1e-6, "1e-06"),
            (0.00094, "0.00094"),
            (0.795431234, "0.795431"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.123456789, "0.123457"),
            (-2.5, "-2.5"),
            (0.00010005, "0.00010005"),
            (1.0005e-3, "0.0010005"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g(x), want, "{x}");
        }
    }

    #[test]
    fn rows_round_trip_and_best_is_picked() {
        let rows = vec![
            EpochMetrics {
                fold: 1,
                epoch: 0,
                train_loss: 0.9,
                valid_loss: 0.8,
                valid_dice: 0.3,
                valid_jaccard: 0.2,
                lr: 2e-3,
            },
            EpochMetrics {
                fold: 0,
                epoch: 0,
                train_loss: 0.9,
                valid_loss: 0.8,
                valid_dice: 0.5,
                valid_jaccard: 0.4,
                lr: 2e-3,
            },
            EpochMetrics {
                fold: 0,
                epoch: 1,
                train_loss: 0.5,
                valid_loss: 0.4,
                valid_dice: 0.5,
                valid_jaccard: 0.4,
                lr: 1e-3,
            },
            EpochMetrics {
                fold: 1,
                epoch: 1,
                train_loss: 0.5,
                valid_loss: 0.4,
                valid_dice: 0.6,
                valid_jaccard: 0.45,
                lr: 1e-3,
            },
        ];
        let text = metrics_csv(&rows);
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        let best = best_per_fold(&rows);
        assert_eq!(
            best.iter().map(|b| (b.fold, b.epoch)).collect::<Vec<_>>(),
            vec![(0, 0), (1, 1)]
        );
    }
}
