//! Thresholded predictions at each scan's native size, and the RLE
//! submission table built from them.

use std::fmt::Write as _;

use crate::data::{encode_rle, resize_nearest, samples_to_batch, Bitmap, Organ, Sample, SliceId};
use crate::model::SegModel;

use super::TrainError;

pub const SUBMISSION_HEADER: &str = "id,class,predicted";

/// Per-class binary masks for every sample, resized back to the scan's
/// source size. Probabilities strictly above `threshold` are foreground.
pub fn predict_masks(
    model: &SegModel,
    samples: &[&Sample],
    threshold: f64,
    batch: usize,
) -> Result<Vec<(SliceId, [Bitmap; 3])>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let (images, _) = samples_to_batch(chunk);
        let probs = model.predict(&images)?;
        let s = probs.shape();
        let (h, w) = (s[2], s[3]);
        for (b, sample) in chunk.iter().enumerate() {
            let masks = std::array::from_fn(|c| {
                let off = (b * 3 + c) * h * w;
                let bits = probs.data()[off..off + h * w]
                    .iter()
                    .map(|&p| u8::from(p > threshold))
                    .collect();
                let m = Bitmap::new(h, w, bits).expect("plane size");
                resize_nearest(&m, sample.source_size.0, sample.source_size.1)
            });
            out.push((sample.id, masks));
        }
    }
    Ok(out)
}

/// `id,class,predicted` with one row per slice and class; empty masks give
/// an empty `predicted` cell.
pub fn submission_csv(predictions: &[(SliceId, [Bitmap; 3])]) -> String {
    let mut s = format!("{SUBMISSION_HEADER}\n");
    for (id, masks) in predictions {
        for o in Organ::ALL {
            let _ = writeln!(s, "{id},{o},{}", encode_rle(&masks[o.index()]));
        }
    }
    s
}
