//! Binary PGM (P5) files and bilinear resizing.

use std::path::Path;

use crate::error::{Error, Result};

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Pixels mapped to `[0, 1]`.
    pub fn unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// From values in `[-1, 1]`.
    pub fn from_signed(width: usize, height: usize, values: &[f32]) -> Self {
        let pixels = values
            .iter()
            .map(|&v| (((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad(path, "truncated PGM header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(bad(path, "not a binary PGM (P5)"));
        }
        let mut num = |what: &str| -> Result<usize> {
            token()?
                .parse()
                .map_err(|_| bad(path, format!("bad PGM {what}")))
        };
        let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval == 0 || maxval > 255 {
            return Err(bad(path, format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let n = width * height;
        let raster = bytes
            .get(start..start + n)
            .ok_or_else(|| bad(path, "truncated PGM raster"))?;
        let pixels = raster
            .iter()
            .map(|&p| ((p as usize * 255 + maxval / 2) / maxval) as u8)
            .collect();
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| bad(path, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(path, e.to_string()))?;
        Self::decode(&bytes, path)
    }
}

/// Bilinear resize of a row-major `w x h` plane with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(src: &[f32], (w, h): (usize, usize), (tw, th): (usize, usize)) -> Vec<f32> {
    assert_eq!(src.len(), w * h, "resize: plane size");
    if (w, h) == (tw, th) {
        return src.to_vec();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let (xs, ys) = (axis(tw, w), axis(th, h));
    let mut out = Vec::with_capacity(tw * th);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}
