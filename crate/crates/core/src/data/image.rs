//! 16-bit grayscale scans: PNG and binary PGM (P5).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage16 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
}

impl GrayImage16 {
    pub fn new(height: usize, width: usize, pixels: Vec<u16>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::Invalid(format!(
                "{height}x{width} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

/// Loads a 16-bit grayscale PNG or P5 PGM, sniffing the format from the
/// file's magic bytes.
pub fn load_image(path: &Path) -> Result<GrayImage16, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let fail = |reason: String| DataError::Image {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(fail)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(fail)
    } else {
        Err(fail("unrecognized image format (expected PNG or P5 PGM)".into()))
    }
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage16, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(format!("unsupported color type {color:?}; expected grayscale"));
    }
    if depth != png::BitDepth::Sixteen {
        return Err(format!("expected 16-bit samples, found {depth:?}"));
    }
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    GrayImage16::new(h, w, pixels).map_err(|e| e.to_string())
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage16, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated PGM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    let [width, height, maxval] = fields;
    if maxval <= 255 || maxval > 65535 {
        return Err(format!("expected 16-bit PGM (maxval 65535), found maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PGM header".into());
    }
    pos += 1;
    let need = width * height * 2;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("truncated PGM: expected {need} data bytes, found {}", bytes.len() - pos))?;
    let pixels = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    GrayImage16::new(height, width, pixels).map_err(|e| e.to_string())
}

pub fn write_pgm16(path: &Path, img: &GrayImage16) -> Result<(), DataError> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(img.pixels.len() * 2);
    for &v in &img.pixels {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

pub fn write_png16(path: &Path, img: &GrayImage16) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let fail = |e: png::EncodingError| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header().map_err(fail)?;
    let data: Vec<u8> = img.pixels.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&data).map_err(fail)?;
    writer.finish().map_err(fail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_fixture_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.pgm");
        let mut bytes = b"P5\n# hand-written\n2 2\n65535\n".to_vec();
        for v in [0u16, 100, 1000, 65535] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        assert_eq!(img.pixels, vec![0, 100, 1000, 65535]);
    }

    #[test]
    fn eight_bit_pgm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("byte.pgm");
        fs::write(&path, b"P5\n2 1\n255\n\x01\x02").unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("expected 16-bit"), "{err}");
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        fs::write(&path, b"P5\n2 2\n65535\n\x00\x01\x00").unwrap();
        assert!(load_image(&path).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn png_and_pgm_decode_identically() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage16::new(3, 2, vec![0, 7, 300, 4096, 65535, 12]).unwrap();
        let (a, b) = (dir.path().join("s.png"), dir.path().join("s.pgm"));
        write_png16(&a, &img).unwrap();
        write_pgm16(&b, &img).unwrap();
        assert_eq!(load_image(&a).unwrap(), img);
        assert_eq!(load_image(&b).unwrap(), img);
    }

    #[test]
    fn eight_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("byte.png");
        let file = fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(file, 2, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[1, 2]).unwrap();
        w.finish().unwrap();
        assert!(load_image(&path).unwrap_err().to_string().contains("expected 16-bit"));
    }
}
