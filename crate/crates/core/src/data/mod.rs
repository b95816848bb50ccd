//! Scan loading, mask codecs, contrast normalization and sample assembly.

mod gcn;
mod image;
mod metadata;
mod rle;
mod sample;

pub use gcn::{gcn_normalize, GcnParams};
pub use image::{load_image, write_pgm16, write_png16, GrayImage16};
pub use metadata::{locate_image, parse_metadata, read_metadata_table, MetadataEntry, SliceId, SliceRecord};
pub use rle::{decode_rle, encode_rle, parse_runs, rle_area, RleError};
pub use sample::{assemble_sample, resize_bilinear, resize_nearest, samples_to_batch, Sample};

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata row {row}: {reason}")]
    Metadata { row: u64, reason: String },
    #[error("{id}/{organ}: {source}")]
    Rle {
        id: String,
        organ: Organ,
        #[source]
        source: RleError,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("no image found for {0}")]
    MissingImage(String),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Segmentation classes, in mask-plane order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Organ {
    LargeBowel,
    SmallBowel,
    Stomach,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::LargeBowel, Organ::SmallBowel, Organ::Stomach];

    pub fn label(self) -> &'static str {
        match self {
            Organ::LargeBowel => "large_bowel",
            Organ::SmallBowel => "small_bowel",
            Organ::Stomach => "stomach",
        }
    }

    pub fn from_label(label: &str) -> Option<Organ> {
        Organ::ALL.into_iter().find(|o| o.label() == label)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Row-major binary image with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Bitmap {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self, DataError> {
        if bits.len() != height * width {
            return Err(DataError::Invalid(format!(
                "bitmap of {height}x{width} needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(DataError::Invalid(format!("non-binary mask value {v}")));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.bits[y * self.width + x] = u8::from(value != 0);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }
}

/// Ground-truth planes ordered (large bowel, small bowel, stomach). Planes
/// are independent, so organs may overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    pub planes: [Bitmap; 3],
}

impl MaskVolume {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            planes: std::array::from_fn(|_| Bitmap::zeros(height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn plane(&self, organ: Organ) -> &Bitmap {
        &self.planes[organ.index()]
    }
}
