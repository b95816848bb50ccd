use crate::tensor::Tensor;

use super::{
    decode_rle, gcn_normalize, load_image, Bitmap, DataError, GcnParams, MaskVolume, Organ, SliceId, SliceRecord,
};

/// One model-ready slice: normalized image `[1, h, w]` plus its masks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: SliceId,
    pub image: Tensor,
    pub mask: MaskVolume,
    /// Native scan size, for mapping predictions back.
    pub source_size: (usize, usize),
}

/// Bilinear resize with half-pixel centers and edge clamping. The identity
/// size is an exact copy.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = axis(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = axis(ox, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Nearest-neighbour resize; source index `floor(o · in / out)`.
pub fn resize_nearest(src: &Bitmap, oh: usize, ow: usize) -> Bitmap {
    let (h, w) = (src.height(), src.width());
    let mut out = Bitmap::zeros(oh, ow);
    for oy in 0..oh {
        let sy = oy * h / oh;
        for ox in 0..ow {
            out.set(oy, ox, src.get(sy, ox * w / ow));
        }
    }
    out
}

/// Loads, normalizes and resizes one record to `target = (h, w)`.
pub fn assemble_sample(rec: &SliceRecord, target: (usize, usize), p: &GcnParams) -> Result<Sample, DataError> {
    let img = load_image(&rec.image_path)?;
    if (img.height, img.width) != (rec.height, rec.width) {
        return Err(DataError::Image {
            path: rec.image_path.clone(),
            reason: format!(
                "decoded {}x{} but metadata says {}x{}",
                img.height, img.width, rec.height, rec.width
            ),
        });
    }
    let normalized = gcn_normalize(&img.to_f64(), p)?;
    let (th, tw) = target;
    let resized = resize_bilinear(&normalized, img.height, img.width, th, tw);
    let mut mask = MaskVolume::empty(th, tw);
    for organ in Organ::ALL {
        if let Some(rle) = rec.rle(organ) {
            let full = decode_rle(rle, rec.height, rec.width).map_err(|source| DataError::Rle {
                id: rec.id.to_string(),
                organ,
                source,
            })?;
            mask.planes[organ.index()] = resize_nearest(&full, th, tw);
        }
    }
    Ok(Sample {
        id: rec.id,
        image: Tensor::new(&[1, th, tw], resized).expect("resize keeps size"),
        mask,
        source_size: (rec.height, rec.width),
    })
}

/// Stacks samples into `([B, 1, h, w] images, [B, 3, h, w] targets)`.
pub fn samples_to_batch(samples: &[&Sample]) -> (Tensor, Tensor) {
    let (h, w) = (samples[0].mask.height(), samples[0].mask.width());
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut targets = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        images.extend_from_slice(s.image.data());
        for plane in &s.mask.planes {
            targets.extend(plane.bits().iter().map(|&b| b as f64));
        }
    }
    let b = samples.len();
    (
        Tensor::new(&[b, 1, h, w], images).expect("uniform sample sizes"),
        Tensor::new(&[b, 3, h, w], targets).expect("uniform sample sizes"),
    )
}
