//! Minimal binary PNM codec. Writes P5 only; reads P5 and P6.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or invalid {what}"))
    }
}

/// Decodes P5 (gray) or P6 (colour, reduced to Rec.601 luma) with maxval <= 255.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err("not a binary PGM/PPM (expected P5 or P6)".into());
    }
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err("missing separator after header".into());
    }
    let data = &bytes[cur.pos + 1..];
    let need = width * height * channels;
    if data.len() < need {
        return Err(format!("truncated raster: {} of {need} bytes", data.len()));
    }
    let scale = |v: f64| (v * 255.0 / maxval as f64 + 0.5).floor().min(255.0) as u8;
    let pixels = if channels == 1 {
        if maxval == 255 {
            data[..need].to_vec()
        } else {
            data[..need].iter().map(|&v| scale(v as f64)).collect()
        }
    } else {
        data[..need]
            .chunks_exact(3)
            .map(|p| scale(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
            .collect()
    };
    Ok(GrayImage { width, height, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 1, 2, 253, 254, 255]);
    }

    #[test]
    fn comments_and_whitespace() {
        let mut bytes = b"P5 # comment\n  2\t# w\n1\n255 ".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.pixels), (2, 1, vec![7, 9]));
    }

    #[test]
    fn colour_is_reduced_to_luma() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 255, 255, 255, 0, 0]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![255, 76]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = GrayImage::new(4, 3, (0..12).map(|v| v * 20).collect()).unwrap();
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        let missing = read_pgm(&dir.path().join("none.pgm")).unwrap_err();
        assert!(missing.to_string().contains("none.pgm"));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let pixels = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let img = GrayImage::new(w, h, pixels).unwrap();
            prop_assert_eq!(decode_pnm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
