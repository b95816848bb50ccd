//! Overlap scores for binary masks.
//!
//! Both scores treat two empty masks as perfect agreement (1.0): most slices
//! carry no annotation for at least one organ.

use thiserror::Error;

use crate::data::Bitmap;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("shape mismatch: {0:?} vs {1:?}")]
pub struct ShapeMismatch(pub Vec<usize>, pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScore {
    pub per_class: [f64; 3],
    pub mean: f64,
}

impl SegScore {
    pub fn from_per_class(per_class: [f64; 3]) -> Self {
        Self {
            per_class,
            mean: per_class.iter().sum::<f64>() / 3.0,
        }
    }
}

/// `(|A|, |B|, |A∩B|)`.
fn counts(a: &[u8], b: &[u8]) -> (usize, usize, usize) {
    a.iter().zip(b).fold((0, 0, 0), |(na, nb, ni), (&x, &y)| {
        (na + x as usize, nb + y as usize, ni + (x & y) as usize)
    })
}

fn dice_from(na: usize, nb: usize, inter: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

fn jaccard_from(na: usize, nb: usize, inter: usize) -> f64 {
    let union = na + nb - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check(pred: &Bitmap, truth: &Bitmap) -> Result<(), ShapeMismatch> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(ShapeMismatch(
            vec![pred.height(), pred.width()],
            vec![truth.height(), truth.width()],
        ));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`.
pub fn dice(pred: &Bitmap, truth: &Bitmap) -> Result<f64, ShapeMismatch> {
    check(pred, truth)?;
    let (a, b, i) = counts(pred.bits(), truth.bits());
    Ok(dice_from(a, b, i))
}

/// `|A∩B| / |A∪B|`.
pub fn jaccard(pred: &Bitmap, truth: &Bitmap) -> Result<f64, ShapeMismatch> {
    check(pred, truth)?;
    let (a, b, i) = counts(pred.bits(), truth.bits());
    Ok(jaccard_from(a, b, i))
}

/// Running per-sample, per-class averages over any number of batches.
#[derive(Debug, Clone, Default)]
pub struct ScoreAccumulator {
    dice: [f64; 3],
    jaccard: [f64; 3],
    samples: usize,
}

impl ScoreAccumulator {
    /// `probs` and `truth` are `[B, 3, h, w]`. Probabilities strictly above
    /// `threshold` count as foreground.
    pub fn add(&mut self, probs: &Tensor, truth: &Tensor, threshold: f64) -> Result<(), ShapeMismatch> {
        let (ps, ts) = (probs.shape(), truth.shape());
        if ps != ts || ps.len() != 4 || ps[1] != 3 {
            return Err(ShapeMismatch(ps.to_vec(), ts.to_vec()));
        }
        let plane = ps[2] * ps[3];
        let mut pred = vec![0u8; plane];
        let mut gt = vec![0u8; plane];
        for b in 0..ps[0] {
            for c in 0..3 {
                let off = (b * 3 + c) * plane;
                for i in 0..plane {
                    pred[i] = u8::from(probs.data()[off + i] > threshold);
                    gt[i] = u8::from(truth.data()[off + i] > 0.5);
                }
                let (na, nb, ni) = counts(&pred, &gt);
                self.dice[c] += dice_from(na, nb, ni);
                self.jaccard[c] += jaccard_from(na, nb, ni);
            }
            self.samples += 1;
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// `(dice, jaccard)` macro-averaged over classes. An empty accumulator
    /// scores zero.
    pub fn finish(&self) -> (SegScore, SegScore) {
        let n = self.samples.max(1) as f64;
        (
            SegScore::from_per_class(self.dice.map(|v| v / n)),
            SegScore::from_per_class(self.jaccard.map(|v| v / n)),
        )
    }
}

/// Thresholds `probs`, scores each sample per class, averages over the batch
/// per class, then over classes.
pub fn score_batch(probs: &Tensor, truth: &Tensor, threshold: f64) -> Result<(SegScore, SegScore), ShapeMismatch> {
    let mut acc = ScoreAccumulator::default();
    acc.add(probs, truth, threshold)?;
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(width: usize, on: &[usize]) -> Bitmap {
        let mut bits = vec![0u8; width];
        for &i in on {
            bits[i] = 1;
        }
        Bitmap::new(1, width, bits).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(10, &[1, 2, 3]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let b = mask(10, &[5, 6]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn both_empty_is_perfect() {
        let e = mask(4, &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn pixel_count_example() {
        // |A| = 6, |B| = 4, |A∩B| = 3
        let a = mask(12, &[0, 1, 2, 3, 4, 5]);
        let b = mask(12, &[3, 4, 5, 9]);
        assert_eq!(dice(&a, &b).unwrap(), 0.6);
        let j = jaccard(&a, &b).unwrap();
        assert!((j - 3.0 / 7.0).abs() < 1e-15);
        assert!((j - 0.6 / (2.0 - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(dice(&mask(3, &[]), &mask(4, &[])).is_err());
    }

    #[test]
    fn batch_scores() {
        let truth = Tensor::new(&[1, 3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let (d, j) = score_batch(&truth, &truth, 0.5).unwrap();
        assert_eq!((d.mean, j.mean), (1.0, 1.0));
        let zeros = Tensor::zeros(&[1, 3, 1, 2]);
        let (d, _) = score_batch(&zeros, &truth, 0.5).unwrap();
        assert_eq!(d.mean, 0.0);
    }

    #[test]
    fn two_sample_batch_matches_per_sample_average() {
        // sample 0: class 0 perfect, class 1 half overlap, class 2 both empty
        // sample 1: class 0 miss, class 1 perfect, class 2 false positive
        let probs = Tensor::new(
            &[2, 3, 1, 2],
            vec![0.9, 0.1, 0.8, 0.7, 0.2, 0.3, /**/ 0.1, 0.2, 0.9, 0.1, 0.6, 0.4],
        )
        .unwrap();
        let truth = Tensor::new(
            &[2, 3, 1, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, /**/ 1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let (d, j) = score_batch(&probs, &truth, 0.5).unwrap();
        // class 1, sample 0: pred {0,1}, truth {0} -> dice 2/3, jaccard 1/2
        let expect_d = [(1.0 + 0.0) / 2.0, (2.0 / 3.0 + 1.0) / 2.0, (1.0 + 0.0) / 2.0];
        let expect_j = [(1.0 + 0.0) / 2.0, (0.5 + 1.0) / 2.0, (1.0 + 0.0) / 2.0];
        for c in 0..3 {
            assert!((d.per_class[c] - expect_d[c]).abs() < 1e-15);
            assert!((j.per_class[c] - expect_j[c]).abs() < 1e-15);
        }
        assert!((d.mean - expect_d.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }
}
