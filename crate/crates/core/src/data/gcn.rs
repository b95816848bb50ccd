use serde::{Deserialize, Serialize};

use super::DataError;

/// Global contrast normalization: `s · x / max(sqrt(λ + mean(x²)), ε)`.
///
/// With `subtract_mean` the image is centered first and the contrast is taken
/// over the centered values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub lambda: f64,
    pub epsilon: f64,
    pub scale: f64,
    pub subtract_mean: bool,
}

impl Default for GcnParams {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            epsilon: 1e-8,
            scale: 1.0,
            subtract_mean: false,
        }
    }
}

impl GcnParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.lambda >= 0.0 && self.epsilon > 0.0 && self.scale > 0.0) {
            return Err(DataError::Invalid(format!(
                "GCN requires lambda >= 0, epsilon > 0, scale > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

pub fn gcn_normalize(x: &[f64], p: &GcnParams) -> Result<Vec<f64>, DataError> {
    p.validate()?;
    if x.is_empty() {
        return Err(DataError::Invalid("GCN on an empty image".into()));
    }
    let n = x.len() as f64;
    let centered: Vec<f64> = if p.subtract_mean {
        let mean = x.iter().sum::<f64>() / n;
        x.iter().map(|v| v - mean).collect()
    } else {
        x.to_vec()
    };
    let mean_sq = centered.iter().map(|v| v * v).sum::<f64>() / n;
    let contrast = (p.lambda + mean_sq).sqrt();
    let k = p.scale / contrast.max(p.epsilon);
    Ok(centered.into_iter().map(|v| v * k).collect())
}
