//! Binary graymaps (Netpbm `P5`), 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Upper bound on `width * height` accepted from a header (4096²).
pub const MAX_PIXELS: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Pgm(format!("{} bytes for a {width}x{height} image", data.len())));
        }
        Ok(GrayImage {
            width,
            height,
            maxval: 255,
            data,
        })
    }

    /// `[1, 1, h, w]` tensor with values `v / maxval`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let scale = 1.0 / self.maxval as f32;
        let data = self.data.iter().map(|&v| v as f32 * scale).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("consistent size")
    }

    /// Quantizes `[.., .., h, w]` plane 0 of `t` from `[0, 1]` to 8 bits
    /// (round half away from zero, clamped).
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let s = t.shape();
        let data = t.plane(0, 0).iter().map(|&v| quantize(v)).collect();
        GrayImage {
            width: s.w,
            height: s.h,
            maxval: 255,
            data,
        }
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pgm(format!("expected {what}")));
        }
        // At most 9 digits so the value fits any usize.
        if self.pos - start > 9 {
            return Err(Error::Pgm(format!("{what} too large")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        Ok(text.parse().unwrap())
    }
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::Pgm("missing P5 magic".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::Pgm("missing separator after magic".into()));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Pgm(format!("empty image {width}x{height}")));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(Error::Pgm(format!("{width}x{height} exceeds the {MAX_PIXELS}-pixel limit")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Pgm(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Pgm("missing separator before raster".into()));
    }
    let start = h.pos + 1;
    let n = width * height;
    let raster = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Pgm(format!("raster truncated: need {n} bytes, have {}", bytes.len() - start)))?;
    let maxval = maxval as u8;
    if let Some(v) = raster.iter().find(|&&v| v > maxval) {
        return Err(Error::Pgm(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(GrayImage {
        width,
        height,
        maxval,
        data: raster.to_vec(),
    })
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Pgm(m) => Error::Pgm(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}
