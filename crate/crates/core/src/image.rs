//! RGB images in `[0, 1]` and the binary PPM (`P6`) codec.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image, channel-interleaved (`H × W × 3`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::filled(width, height, [1.0; 3])
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, 3],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Planar `3 × H × W` layout, mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_chw_signed(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = self.pixels[p * 3 + c] * 2.0 - 1.0;
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw_signed`]; values are not clamped.
    pub fn from_chw_signed(width: usize, height: usize, chw: &[f32]) -> Self {
        let hw = width * height;
        let mut pixels = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                pixels[p * 3 + c] = (chw[c * hw + p] + 1.0) * 0.5;
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// 8-bit quantization used by the PPM writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_pixels(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Encodes as binary PPM: `P6\n<w> <h>\n255\n` followed by RGB bytes.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() {
                match bytes[pos] {
                    b' ' | b'\t' | b'\n' | b'\r' => pos += 1,
                    b'#' => {
                        while pos < bytes.len() && bytes[pos] != b'\n' {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| format!("bad header field {s:?}: {e}"))
        };
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported max value {maxval}"));
        }
        // exactly one whitespace byte separates header from payload
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(format!(
                "payload has {} bytes, expected {need}",
                bytes.len().saturating_sub(pos)
            ));
        }
        Self::from_bytes(w, h, &bytes[pos..pos + need]).map_err(|e| e.to_string())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes).map_err(|r| Error::format(path, r))
    }
}
