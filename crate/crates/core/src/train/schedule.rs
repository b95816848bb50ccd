use super::TrainError;

/// Cosine annealing from `lr_init` at `t = 0` to `lr_min` at `t = t_max`:
/// `lr_min + (lr_init − lr_min)·(1 + cos(π·t/t_max))/2`. Both endpoints are
/// returned exactly.
pub fn cosine_annealing_lr(t: usize, t_max: usize, lr_init: f64, lr_min: f64) -> Result<f64, TrainError> {
    if t_max == 0 || t > t_max {
        return Err(TrainError::Config(format!(
            "epoch {t} outside the schedule [0, {t_max}]"
        )));
    }
    if t == 0 {
        return Ok(lr_init);
    }
    if t == t_max {
        return Ok(lr_min);
    }
    let phase = std::f64::consts::PI * t as f64 / t_max as f64;
    Ok(lr_min + (lr_init - lr_min) * (1.0 + phase.cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_annealing_lr(0, 30, 2e-3, 1e-6).unwrap(), 2e-3);
        assert_eq!(cosine_annealing_lr(30, 30, 2e-3, 1e-6).unwrap(), 1e-6);
        let mid = cosine_annealing_lr(15, 30, 2e-3, 1e-6).unwrap();
        assert!((mid - 1.0005e-3).abs() < 1e-15, "{mid}");
        assert!(cosine_annealing_lr(31, 30, 2e-3, 1e-6).is_err());
        assert!(cosine_annealing_lr(0, 0, 2e-3, 1e-6).is_err());
    }

    #[test]
    fn strictly_decreasing() {
        for t_max in [1, 2, 7, 15, 100] {
            let lrs: Vec<f64> = (0..=t_max)
                .map(|t| cosine_annealing_lr(t, t_max, 2e-3, 1e-6).unwrap())
                .collect();
            assert!(lrs.windows(2).all(|w| w[1] < w[0]), "{t_max}: {lrs:?}");
        }
    }
}
