//! Run-length codec for binary masks.
//!
//! Runs are `start length` pairs over the row-major flattening of an H×W
//! mask, with 1-indexed starts. The canonical encoding lists maximal runs in
//! ascending order separated by single spaces; an empty mask encodes to "".

use thiserror::Error;

use super::Bitmap;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RleError {
    #[error("odd number of tokens ({0}); runs are start/length pairs")]
    OddTokenCount(usize),
    #[error("token {0:?} is not a positive integer")]
    BadToken(String),
    #[error("run {start}+{length} exceeds mask of {pixels} pixels")]
    OutOfBounds { start: usize, length: usize, pixels: usize },
    #[error("run starting at {start} overlaps or precedes the previous run ending at {prev_end}")]
    NotAscending { start: usize, prev_end: usize },
}

/// Parses an RLE string into `(zero-based start, length)` runs, validating
/// order and bounds against a mask of `pixels` pixels.
pub fn parse_runs(rle: &str, pixels: usize) -> Result<Vec<(usize, usize)>, RleError> {
    let tokens: Vec<&str> = rle.split_whitespace().collect();
    if !tokens.len().is_multiple_of(2) {
        return Err(RleError::OddTokenCount(tokens.len()));
    }
    let number = |t: &str| -> Result<usize, RleError> {
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(RleError::BadToken(t.to_string())),
        }
    };
    let mut runs = Vec::with_capacity(tokens.len() / 2);
    let mut prev_end = 0usize;
    for pair in tokens.chunks(2) {
        let start = number(pair[0])?;
        let length = number(pair[1])?;
        let begin = start - 1;
        if begin < prev_end {
            return Err(RleError::NotAscending { start, prev_end });
        }
        if begin.checked_add(length).is_none_or(|end| end > pixels) {
            return Err(RleError::OutOfBounds { start, length, pixels });
        }
        prev_end = begin + length;
        runs.push((begin, length));
    }
    Ok(runs)
}

pub fn decode_rle(rle: &str, height: usize, width: usize) -> Result<Bitmap, RleError> {
    let mut bitmap = Bitmap::zeros(height, width);
    for (begin, length) in parse_runs(rle, height * width)? {
        bitmap.bits_mut()[begin..begin + length].fill(1);
    }
    Ok(bitmap)
}

pub fn encode_rle(bitmap: &Bitmap) -> String {
    let bits = bitmap.bits();
    let mut parts = Vec::new();
    let mut i = 0;
    while i < bits.len() {
        if bits[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < bits.len() && bits[i] != 0 {
            i += 1;
        }
        parts.push(format!("{} {}", start + 1, i - start));
    }
    parts.join(" ")
}

/// Pixel count of an RLE string (sum of run lengths).
pub fn rle_area(rle: &str, pixels: usize) -> Result<usize, RleError> {
    Ok(parse_runs(rle, pixels)?.iter().map(|&(_, l)| l).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string_is_empty_mask() {
        let m = decode_rle("", 4, 4).unwrap();
        assert_eq!(m.count_ones(), 0);
        assert_eq!(encode_rle(&m), "");
    }

    #[test]
    fn one_indexed_row_major_runs() {
        let m = decode_rle("1 3", 2, 4).unwrap();
        assert_eq!(m.get(0, 0) + m.get(0, 1) + m.get(0, 2), 3);
        assert_eq!(m.count_ones(), 3);
        assert_eq!(m.get(0, 3), 0);
    }

    #[test]
    fn canonical_encodings() {
        let mut m = Bitmap::zeros(3, 5);
        m.set(0, 0, 1);
        assert_eq!(encode_rle(&m), "1 1");
        let full = Bitmap::new(3, 5, vec![1; 15]).unwrap();
        assert_eq!(encode_rle(&full), "1 15");
        // runs wrap across rows in the flattening
        let m = decode_rle("5 2 9 1", 3, 5).unwrap();
        assert_eq!((m.get(0, 4), m.get(1, 0), m.get(1, 3)), (1, 1, 1));
        assert_eq!(encode_rle(&m), "5 2 9 1");
    }

    #[test]
    fn adjacent_runs_decode_and_merge() {
        let m = decode_rle("1 2 3 2", 1, 6).unwrap();
        assert_eq!(encode_rle(&m), "1 4");
    }

    #[test]
    fn malformed_strings_are_rejected() {
        assert_eq!(decode_rle("1 2 3", 4, 4), Err(RleError::OddTokenCount(3)));
        assert!(matches!(decode_rle("1 x", 4, 4), Err(RleError::BadToken(_))));
        assert!(matches!(decode_rle("0 2", 4, 4), Err(RleError::BadToken(_))));
        assert!(matches!(decode_rle("1 0", 4, 4), Err(RleError::BadToken(_))));
        assert!(matches!(decode_rle("-1 2", 4, 4), Err(RleError::BadToken(_))));
        assert!(matches!(decode_rle("15 3", 4, 4), Err(RleError::OutOfBounds { .. })));
        assert!(matches!(
            decode_rle("1 5 3 2", 4, 4),
            Err(RleError::NotAscending { .. })
        ));
        assert!(matches!(
            decode_rle("8 1 2 1", 4, 4),
            Err(RleError::NotAscending { .. })
        ));
    }
}
