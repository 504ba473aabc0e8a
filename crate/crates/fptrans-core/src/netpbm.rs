//! Binary NetPBM readers and writers: P6 (RGB) for images, P5 (grayscale)
//! for masks. Only maxval 255 is supported and the writer emits a canonical
//! header, so save -> load -> save round-trips byte-identically.

use crate::error::{Error, Result};
use crate::partition::BinaryMask;
use std::fs;
use std::path::Path;

/// An 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{}x{} RGB needs {} bytes, got {}", width, height, width * height * 3, pixels.len()),
            ));
        }
        Ok(Image { width, height, pixels })
    }

    /// Channel-major f64 planes in [0, 1], the layout `patchify` expects.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.pixels[i * 3 + c] as f64 / 255.0;
            }
        }
        out
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Parser<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an ASCII integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }

    fn read_header(&mut self, magic: &[u8]) -> Result<(usize, usize)> {
        if self.bytes.len() < 2 || &self.bytes[..2] != magic {
            return Err(self.err(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = 2;
        let width = self.read_number()?;
        let height = self.read_number()?;
        let maxval = self.read_number()?;
        if maxval != 255 {
            return Err(self.err(format!("unsupported maxval {maxval}, only 255")));
        }
        if width == 0 || height == 0 {
            return Err(self.err("zero dimension"));
        }
        // Exactly one whitespace byte separates header and payload.
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(self.err("missing whitespace before payload"));
        }
        self.pos += 1;
        Ok((width, height))
    }

    fn read_payload(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err(format!(
                "payload truncated: need {} bytes, have {}",
                len,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// Parse a P6 image from raw bytes.
pub fn decode_image(bytes: &[u8], path: &str) -> Result<Image> {
    let mut p = Parser {
        bytes,
        pos: 0,
        path: path.to_string(),
    };
    let (width, height) = p.read_header(b"P6")?;
    let payload = p.read_payload(width * height * 3)?;
    Image::new(width, height, payload.to_vec())
}

/// Parse a P5 mask from raw bytes; values threshold at 128 into {0, 1}.
pub fn decode_mask(bytes: &[u8], path: &str) -> Result<BinaryMask> {
    let mut p = Parser {
        bytes,
        pos: 0,
        path: path.to_string(),
    };
    let (width, height) = p.read_header(b"P5")?;
    let payload = p.read_payload(width * height)?;
    let data = payload.iter().map(|&v| u8::from(v >= 128)).collect();
    BinaryMask::new(height, width, data)
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
    out
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, &path.display().to_string())
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, &path.display().to_string())
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}
