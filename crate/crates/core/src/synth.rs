//! Synthetic scans with geometric "organs" and matching RLE metadata.
//!
//! Every organ class has its own shape and intensity: the large bowel is a
//! ring, the small bowel an ellipse, the stomach a rectangle, each placed in
//! a class-specific zone of a dim body disc. Shapes are rasterized on a
//! 2-pixel lattice (every 2×2 block is uniformly in or out), which a network
//! whose finest output is a ×2 upsampling can represent exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{encode_rle, write_pgm16, Bitmap, DataError, GrayImage16, Organ, SliceId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ring { cy: f64, cx: f64, inner: f64, outer: f64 },
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Rect { y0, x0, y1, x1 } => (y0..=y1).contains(&y) && (x0..=x1).contains(&x),
            Shape::Ring { cy, cx, inner, outer } => {
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                (inner..=outer).contains(&r)
            }
        }
    }

    /// Tests the center of each 2×2 block and fills the whole block.
    pub fn rasterize(&self, height: usize, width: usize) -> Bitmap {
        let mut m = Bitmap::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (by, bx) = ((y / 2 * 2) as f64 + 1.0, (x / 2 * 2) as f64 + 1.0);
                m.set(y, x, u8::from(self.contains(by, bx)));
            }
        }
        m
    }
}

/// Mean intensity of each organ class and of the body background.
pub const ORGAN_INTENSITY: [u16; 3] = [3400, 1800, 2600];
pub const BODY_INTENSITY: u16 = 600;
const NOISE: u16 = 60;

fn random_shape(rng: &mut ChaCha8Rng, organ: Organ, h: usize, w: usize) -> Shape {
    let (hf, wf) = (h as f64, w as f64);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match organ {
        Organ::LargeBowel => {
            let outer = u(0.10, 0.16) * hf.min(wf);
            Shape::Ring {
                cy: u(0.68, 0.75) * hf,
                cx: u(0.38, 0.62) * wf,
                inner: 0.5 * outer,
                outer,
            }
        }
        Organ::SmallBowel => Shape::Ellipse {
            cy: u(0.25, 0.40) * hf,
            cx: u(0.62, 0.75) * wf,
            ry: u(0.08, 0.15) * hf,
            rx: u(0.08, 0.12) * wf,
        },
        Organ::Stomach => {
            let (y0, x0) = (u(0.12, 0.22) * hf, u(0.12, 0.22) * wf);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + u(0.14, 0.22) * hf,
                x1: x0 + u(0.14, 0.22) * wf,
            }
        }
    }
}

/// One generated slice: the scan and the shape drawn for each present organ.
#[derive(Debug, Clone)]
pub struct SynthSlice {
    pub image: GrayImage16,
    pub shapes: [Option<Shape>; 3],
}

impl SynthSlice {
    pub fn masks(&self) -> [Option<Bitmap>; 3] {
        self.shapes
            .map(|s| s.map(|s| s.rasterize(self.image.height, self.image.width)))
    }
}

pub fn synth_slice(rng: &mut ChaCha8Rng, present: [bool; 3], height: usize, width: usize) -> SynthSlice {
    let shapes: [Option<Shape>; 3] =
        std::array::from_fn(|i| present[i].then(|| random_shape(rng, Organ::ALL[i], height, width)));
    let masks: Vec<Option<Bitmap>> = shapes.iter().map(|s| s.map(|s| s.rasterize(height, width))).collect();
    let body = Shape::Ellipse {
        cy: height as f64 / 2.0,
        cx: width as f64 / 2.0,
        ry: 0.46 * height as f64,
        rx: 0.46 * width as f64,
    };
    let mut pixels = vec![0u16; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut base = None;
            if body.contains(y as f64 + 0.5, x as f64 + 0.5) {
                base = Some(BODY_INTENSITY);
            }
            for (c, m) in masks.iter().enumerate() {
                if m.as_ref().is_some_and(|m| m.get(y, x) == 1) {
                    base = Some(ORGAN_INTENSITY[c]);
                }
            }
            if let Some(v) = base {
                pixels[y * width + x] = v - NOISE + rng.random_range(0..=2 * NOISE);
            }
        }
    }
    SynthSlice {
        image: GrayImage16::new(height, width, pixels).expect("positive size"),
        shapes,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynthConfig {
    pub cases: u32,
    pub days_per_case: u32,
    pub slices_per_day: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 8,
            days_per_case: 1,
            slices_per_day: 4,
            height: 64,
            width: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub metadata: PathBuf,
    pub files: Vec<PathBuf>,
    pub organ_hist: [usize; 4],
    /// The shapes drawn on every slice, in metadata order.
    pub shapes: Vec<(SliceId, [Option<Shape>; 3])>,
}

/// Writes `train.csv` and `train/case{N}/case{N}_day{M}/scans/*.pgm` under
/// `out`. A non-empty `out` is refused unless `force`, in which case the
/// previously generated tree is replaced.
pub fn generate_dataset(out: &Path, cfg: &SynthConfig, force: bool) -> Result<SynthSummary, DataError> {
    if cfg.cases == 0 || cfg.days_per_case == 0 || cfg.slices_per_day == 0 || cfg.height < 2 || cfg.width < 2 {
        return Err(DataError::Invalid(format!(
            "degenerate synthetic dataset config {cfg:?}"
        )));
    }
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(DataError::Invalid(format!(
                "{} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        for stale in [out.join("train"), out.join("train.csv")] {
            let res = if stale.is_dir() {
                fs::remove_dir_all(&stale)
            } else {
                fs::remove_file(&stale)
            };
            if let Err(e) = res {
                if e.kind() != std::io::ErrorKind::NotFound {
                    return Err(DataError::io(stale, e));
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;

    let mut ids = Vec::new();
    for case in 1..=cfg.cases {
        for day in 1..=cfg.days_per_case {
            for slice in 1..=cfg.slices_per_day {
                ids.push(SliceId { case, day, slice });
            }
        }
    }
    // organ counts cycle through 0..=3 and are then shuffled over slices
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts: Vec<usize> = (0..ids.len()).map(|i| i % 4).collect();
    counts.shuffle(&mut rng);

    let mut rows = String::from("id,class,segmentation\n");
    let mut files = Vec::new();
    let mut organ_hist = [0usize; 4];
    let mut shapes = Vec::with_capacity(ids.len());
    for (id, &count) in ids.iter().zip(&counts) {
        let mut order = [0usize, 1, 2];
        order.shuffle(&mut rng);
        let mut present = [false; 3];
        for &c in &order[..count] {
            present[c] = true;
        }
        organ_hist[count] += 1;
        let mut slice_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let s = synth_slice(&mut slice_rng, present, cfg.height, cfg.width);
        let dir = out
            .join("train")
            .join(format!("case{}", id.case))
            .join(format!("case{}_day{}", id.case, id.day))
            .join("scans");
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let path = dir.join(format!(
            "slice_{:04}_{}_{}_1.50_1.50.pgm",
            id.slice, cfg.width, cfg.height
        ));
        write_pgm16(&path, &s.image)?;
        files.push(path);
        shapes.push((*id, s.shapes));
        for (organ, mask) in Organ::ALL.iter().zip(s.masks()) {
            let rle = mask.map(|m| encode_rle(&m)).unwrap_or_default();
            rows.push_str(&format!("{id},{organ},{rle}\n"));
        }
    }
    let metadata = out.join("train.csv");
    fs::write(&metadata, rows).map_err(|e| DataError::io(&metadata, e))?;
    files.insert(0, metadata.clone());
    Ok(SynthSummary {
        metadata,
        files,
        organ_hist,
        shapes,
    })
}
