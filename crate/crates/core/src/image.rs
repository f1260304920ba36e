//! Channel-major float images and the two on-disk encodings used by the
//! pipeline: PFM (lossless, cache) and binary PPM/PGM (8-bit, dataset export).

use std::fmt;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Pixel values of generated images are clamped into this range.
pub const PIXEL_MIN: f32 = -1.0;
pub const PIXEL_MAX: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Default toy shape: person aspect ratio (256x128 crops) at 1/8 scale.
    pub const fn toy() -> Self {
        Self::new(3, 32, 16)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A channel-major (C, H, W) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid(format!("image shape {shape} is empty")));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "image data has {} values, shape {shape} needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: ImageShape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds an image from f64 values, rounding to f32 storage.
    pub fn from_f64(shape: ImageShape, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn clamp_pixels(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(PIXEL_MIN, PIXEL_MAX);
        }
    }

    /// Per-channel mean over the half-open box `[y0, y1) x [x0, x1)`.
    pub fn region_mean(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f64> {
        let (y1, x1) = (y1.min(self.shape.height), x1.min(self.shape.width));
        let n = (y1.saturating_sub(y0) * x1.saturating_sub(x0)).max(1) as f64;
        (0..self.shape.channels)
            .map(|c| {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += f64::from(self.get(c, y, x));
                    }
                }
                s / n
            })
            .collect()
    }

    /// Area-weighted resampling to a new spatial size. Reduces to box
    /// averaging when shrinking by an integer factor and to pixel
    /// replication when growing by one.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be non-empty"));
        }
        if height == self.shape.height && width == self.shape.width {
            return Ok(self.clone());
        }
        let ry = axis_weights(self.shape.height, height);
        let rx = axis_weights(self.shape.width, width);
        let shape = ImageShape::new(self.shape.channels, height, width);
        let mut out = Image::zeros(shape);
        for c in 0..shape.channels {
            for (oy, wy) in ry.iter().enumerate() {
                for (ox, wx) in rx.iter().enumerate() {
                    let mut acc = 0.0f64;
                    for &(iy, a) in wy {
                        for &(ix, b) in wx {
                            acc += a * b * f64::from(self.get(c, iy, ix));
                        }
                    }
                    out.set(c, oy, ox, acc as f32);
                }
            }
        }
        Ok(out)
    }

    pub fn encode_pfm(&self) -> Result<Vec<u8>> {
        let tag = match self.shape.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::invalid(format!("PFM supports 1 or 3 channels, got {c}"))),
        };
        let ImageShape {
            channels,
            height,
            width,
        } = self.shape;
        let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
        out.reserve(self.data.len() * 4);
        // PFM rows run bottom-to-top with interleaved channels.
        for y in (0..height).rev() {
            for x in 0..width {
                for c in 0..channels {
                    out.extend_from_slice(&self.get(c, y, x).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
        let (fields, body) = split_header(bytes, 4)?;
        let channels = match fields[0].as_str() {
            "Pf" => 1,
            "PF" => 3,
            t => return Err(Error::Integrity(format!("bad PFM tag `{t}`"))),
        };
        let width = parse_dim(&fields[1])?;
        let height = parse_dim(&fields[2])?;
        let scale: f32 = fields[3]
            .parse()
            .map_err(|_| Error::Integrity(format!("bad PFM scale `{}`", fields[3])))?;
        let shape = ImageShape::new(channels, height, width);
        if body.len() != shape.len() * 4 {
            return Err(Error::Integrity(format!(
                "PFM payload has {} bytes, expected {}",
                body.len(),
                shape.len() * 4
            )));
        }
        let mut img = Image::zeros(shape);
        let mut chunks = body.chunks_exact(4);
        for y in (0..height).rev() {
            for x in 0..width {
                for c in 0..channels {
                    let b: [u8; 4] = chunks.next().unwrap().try_into().unwrap();
                    let v = if scale < 0.0 {
                        f32::from_le_bytes(b)
                    } else {
                        f32::from_be_bytes(b)
                    };
                    img.set(c, y, x, v);
                }
            }
        }
        Ok(img)
    }

    /// 8-bit binary PPM (3 channels) or PGM (1 channel); `[-1, 1]` maps to `[0, 255]`.
    pub fn encode_pnm(&self) -> Result<Vec<u8>> {
        let tag = match self.shape.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::invalid(format!("PNM supports 1 or 3 channels, got {c}"))),
        };
        let ImageShape {
            channels,
            height,
            width,
        } = self.shape;
        let mut out = format!("{tag}\n{width} {height}\n255\n").into_bytes();
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = (self.get(c, y, x).clamp(PIXEL_MIN, PIXEL_MAX) + 1.0) * 127.5;
                    out.push(v.round() as u8);
                }
            }
        }
        Ok(out)
    }

    pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
        let (fields, body) = split_header(bytes, 4)?;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            t => return Err(Error::Integrity(format!("unsupported PNM tag `{t}`"))),
        };
        let width = parse_dim(&fields[1])?;
        let height = parse_dim(&fields[2])?;
        if fields[3] != "255" {
            return Err(Error::Integrity("only 8-bit PNM is supported".into()));
        }
        let shape = ImageShape::new(channels, height, width);
        if body.len() != shape.len() {
            return Err(Error::Integrity(format!(
                "PNM payload has {} bytes, expected {}",
                body.len(),
                shape.len()
            )));
        }
        let mut img = Image::zeros(shape);
        let mut it = body.iter();
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f32::from(*it.next().unwrap()) / 127.5 - 1.0;
                    img.set(c, y, x, v);
                }
            }
        }
        Ok(img)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).at(path)?;
        match bytes.get(..2) {
            Some(b"PF") | Some(b"Pf") => Image::decode_pfm(&bytes),
            _ => Image::decode_pnm(&bytes),
        }
    }
}

/// For each output cell, the input cells it overlaps and their area weights.
fn axis_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let mut cells = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < input {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    cells.push((i, overlap / scale));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Integrity(format!("bad image dimension `{s}`")))
}

/// Splits `n` whitespace-separated ASCII header fields off the front of a
/// netpbm-style file. Exactly one whitespace byte separates the last field
/// from the binary payload.
fn split_header(bytes: &[u8], n: usize) -> Result<(Vec<String>, &[u8])> {
    let mut fields = Vec::with_capacity(n);
    let mut i = 0;
    while fields.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Integrity("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::Integrity("image has no payload".into()));
    }
    Ok((fields, &bytes[i + 1..]))
}
