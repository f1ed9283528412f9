//! Grayscale images in [0,1] and binary PGM I/O.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, TincError};

/// Smallest side length accepted for pipeline images.
pub const MIN_SIDE: usize = 32;

/// Provenance and realized augmentation parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImageMeta {
    pub source: Option<String>,
    /// Realized crop area as a fraction of the source image.
    pub crop_area_ratio: Option<f64>,
    /// (top, left, height, width) of the crop in source pixels.
    pub crop_rect: Option<(usize, usize, usize, usize)>,
    pub rotation_deg: Option<f64>,
    pub translation_px: Option<(f64, f64)>,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub meta: ImageMeta,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(TincError::invalid(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(TincError::ShapeMismatch {
                left: format!("image {height}x{width}"),
                right: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TincError::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image {
            height,
            width,
            pixels,
            meta: ImageMeta::default(),
        })
    }

    /// Builds an image from a pixel function; values are clamped to [0,1].
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x).clamp(0.0, 1.0));
            }
        }
        Image::new(height, width, pixels)
    }

    pub(crate) fn from_parts(height: usize, width: usize, pixels: Vec<f64>, meta: ImageMeta) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        Image {
            height,
            width,
            pixels,
            meta,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Mean over the rectangle rows `r0..r1`, columns `c0..c1`.
    pub fn region_mean(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let mut acc = 0.0;
        for y in r0..r1 {
            acc += self.pixels[y * self.width + c0..y * self.width + c1].iter().sum::<f64>();
        }
        acc / ((r1 - r0) * (c1 - c0)) as f64
    }

    /// Bilinear sample at fractional coordinates with edge clamping.
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let wy = y - y0 as f64;
        let wx = x - x0 as f64;
        let top = self.get(y0, x0) * (1.0 - wx) + self.get(y0, x1) * wx;
        let bottom = self.get(y1, x0) * (1.0 - wx) + self.get(y1, x1) * wx;
        top * (1.0 - wy) + bottom * wy
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

fn next_token<'a>(data: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &data[start..*pos])
}

/// Decodes a binary (P5) PGM with maxval 255.
pub fn decode_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| TincError::invalid(format!("malformed PGM: {m}"));
    let mut pos = 0;
    if next_token(data, &mut pos) != Some(b"P5") {
        return Err(bad("expected P5 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        next_token(data, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(what))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let body = data.get(pos..pos + width * height).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((height, width, body.to_vec()))
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_u8());
    out
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let data = fs::read(path).map_err(|e| TincError::io(path, e))?;
    let (h, w, bytes) = decode_pgm(&data).map_err(|e| TincError::invalid(format!("{}: {e}", path.display())))?;
    let mut img = Image::from_u8(h, w, &bytes)?;
    img.meta.source = Some(path.display().to_string());
    Ok(img)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| TincError::io(path, e))
}
