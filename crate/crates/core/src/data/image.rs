//! Image rasters, the two on-disk formats, resizing and patch slicing.
//!
//! UIMG layout: the four bytes `UIMG`, then height, width and channel count
//! as little-endian `u32`, then `h·w·c` little-endian `f32` pixels in
//! row-major HWC order. PPM is the binary `P6` variant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const UIMG_MAGIC: &[u8; 4] = b"UIMG";

/// Pixels in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageRaster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::Format(format!("images need 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Format("image has a zero dimension".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Format(format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Nearest-neighbour resize to `size × size`.
    pub fn resize_nearest(&self, size: usize) -> Self {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let mut data = Vec::with_capacity(size * size * self.channels);
        for y in 0..size {
            let sy = y * self.height / size;
            for x in 0..size {
                let sx = x * self.width / size;
                for c in 0..self.channels {
                    data.push(self.pixel(sy, sx, c));
                }
            }
        }
        Self {
            height: size,
            width: size,
            channels: self.channels,
            data,
        }
    }

    /// Grey → RGB replicates; RGB → grey averages.
    pub fn with_channels(&self, channels: usize) -> Self {
        if channels == self.channels {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = match (self.channels, channels) {
            (1, 3) => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            (3, 1) => (0..n)
                .map(|i| (self.data[3 * i] + self.data[3 * i + 1] + self.data[3 * i + 2]) / 3.0)
                .collect(),
            _ => unreachable!("channel counts are validated at construction"),
        };
        Self {
            height: self.height,
            width: self.width,
            channels,
            data,
        }
    }

    pub fn to_uimg(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(UIMG_MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_uimg(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != UIMG_MAGIC {
            return Err(Error::Format("not a UIMG file".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(4), dim(8), dim(12));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Format("UIMG dimensions overflow".into()))?;
        let body = &bytes[16..];
        if body.len() != 4 * n {
            return Err(Error::Format(format!(
                "UIMG payload is {} bytes, expected {}",
                body.len(),
                4 * n
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(h, w, c, data)
    }

    /// Binary PPM with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let rgb = self.with_channels(3);
        let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
        out.extend(
            rgb.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Format(format!("unsupported PPM magic '{}'", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field '{s}'")))
        };
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("PPM maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let need = w * h * 3 * if wide { 2 } else { 1 };
        let body = bytes.get(pos..).unwrap_or_default();
        if body.len() < need {
            return Err(Error::Format(format!(
                "PPM raster has {} bytes, expected {need}",
                body.len()
            )));
        }
        let m = maxval as f32;
        let data = if wide {
            body[..need]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / m)
                .collect()
        } else {
            body[..need].iter().map(|&b| b as f32 / m).collect()
        };
        Self::new(h, w, 3, data)
    }

    /// Reads either format, chosen by magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(UIMG_MAGIC) {
            Self::from_uimg(&bytes)
        } else if bytes.starts_with(b"P6") {
            Self::from_ppm(&bytes)
        } else {
            Err(Error::Format(format!(
                "{}: neither UIMG nor P6 PPM",
                path.display()
            )))
        }
    }

    pub fn save_uimg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_uimg()).map_err(|e| Error::io(path, e))
    }
}

/// Slices an image into non-overlapping `p × p` patches in row-major patch
/// order. Each row of the result is one patch flattened in HWC order.
pub fn patchify(img: &ImageRaster, p: usize) -> Result<Tensor> {
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(shape_err!(
            "{}x{} image is not divisible into {p}x{p} patches",
            img.height,
            img.width
        ));
    }
    let (ph, pw, c) = (img.height / p, img.width / p, img.channels);
    let len = p * p * c;
    let mut data = Vec::with_capacity(ph * pw * len);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..p {
                let row = ((py * p + y) * img.width + px * p) * c;
                data.extend(img.data[row..row + p * c].iter().map(|&v| v as f64));
            }
        }
    }
    Tensor::matrix(ph * pw, len, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, p: usize) -> Result<ImageRaster> {
    let (ph, pw) = (height / p, width / p);
    if patches.rows() != ph * pw || patches.cols() != p * p * channels {
        return Err(shape_err!(
            "patch matrix {:?} does not tile a {height}x{width}x{channels} image with patch {p}",
            patches.shape()
        ));
    }
    let mut data = vec![0f32; height * width * channels];
    for py in 0..ph {
        for px in 0..pw {
            let patch = patches.row(py * pw + px);
            for y in 0..p {
                let row = ((py * p + y) * width + px * p) * channels;
                for (dst, &src) in data[row..row + p * channels]
                    .iter_mut()
                    .zip(&patch[y * p * channels..(y + 1) * p * channels])
                {
                    *dst = src as f32;
                }
            }
        }
    }
    ImageRaster::new(height, width, channels, data)
}
