//! Preprocessing and augmentation of grayscale B-scans.
//!
//! Everything here is a pure function of the input image and a caller-owned
//! RNG, so augmentations are reproducible given a seed.

mod geometry;
mod image;
mod transforms;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TincError};

pub use geometry::{column_peaks, estimate_contour, fit_quadratic, flatten, flatten_shifts, Quadratic};
pub use image::{decode_pgm, encode_pgm, read_pgm, write_pgm, Image, ImageMeta, MIN_SIDE};
pub use transforms::{
    affine_resize, brightness_contrast, hflip, random_resized_crop, resize_bilinear,
    sample_crop_rect,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Ssl,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    pub crop_area_range: (f64, f64),
    /// Width/height ratio range for crops.
    pub aspect_range: (f64, f64),
    pub target_size: (usize, usize),
    pub max_rotation_deg: f64,
    pub max_translation_frac: f64,
    pub hflip_prob: f64,
    /// Brightness and contrast factors are drawn from `1 ± jitter`.
    pub jitter: f64,
}

impl AugmentPolicy {
    pub fn ssl(target_size: (usize, usize)) -> Self {
        AugmentPolicy {
            mode: AugmentMode::Ssl,
            crop_area_range: (0.4, 0.8),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            target_size,
            max_rotation_deg: 0.0,
            max_translation_frac: 0.0,
            hflip_prob: 0.5,
            jitter: 0.2,
        }
    }

    pub fn supervised(target_size: (usize, usize)) -> Self {
        AugmentPolicy {
            mode: AugmentMode::Supervised,
            crop_area_range: (1.0, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            target_size,
            max_rotation_deg: 10.0,
            max_translation_frac: 0.1,
            hflip_prob: 0.5,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_area_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(TincError::invalid(format!(
                "crop_area_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(TincError::invalid(format!("invalid aspect_range ({alo}, {ahi})")));
        }
        if self.target_size.0 < MIN_SIDE || self.target_size.1 < MIN_SIDE {
            return Err(TincError::invalid(format!(
                "target_size must be at least {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        let bounded = [
            ("max_rotation_deg", self.max_rotation_deg, 180.0),
            ("max_translation_frac", self.max_translation_frac, 1.0),
            ("hflip_prob", self.hflip_prob, 1.0),
            ("jitter", self.jitter, 1.0),
        ];
        for (name, v, max) in bounded {
            if !(0.0..=max).contains(&v) {
                return Err(TincError::invalid(format!("{name} must lie in [0, {max}], got {v}")));
            }
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, rng: &mut R) -> Result<Image> {
        match self.mode {
            AugmentMode::Ssl => ssl_augment(image, self, rng),
            AugmentMode::Supervised => supervised_augment(image, self, rng),
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, mag: f64) -> f64 {
    if mag > 0.0 {
        rng.random_range(-mag..=mag)
    } else {
        0.0
    }
}

/// Crop, flip, then brightness/contrast jitter.
pub fn ssl_augment<R: Rng + ?Sized>(image: &Image, policy: &AugmentPolicy, rng: &mut R) -> Result<Image> {
    let mut out = random_resized_crop(
        image,
        policy.crop_area_range,
        policy.aspect_range,
        policy.target_size,
        rng,
    )?;
    if rng.random::<f64>() < policy.hflip_prob {
        out = hflip(&out);
    }
    if policy.jitter > 0.0 {
        let b = 1.0 + symmetric(rng, policy.jitter);
        let c = 1.0 + symmetric(rng, policy.jitter);
        out = brightness_contrast(&out, b, c);
    }
    Ok(out)
}

/// Rotation, translation and flip, then resize.
pub fn supervised_augment<R: Rng + ?Sized>(
    image: &Image,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Image> {
    let angle = symmetric(rng, policy.max_rotation_deg);
    let ty = symmetric(rng, policy.max_translation_frac) * image.height() as f64;
    let tx = symmetric(rng, policy.max_translation_frac) * image.width() as f64;
    let flip = rng.random::<f64>() < policy.hflip_prob;
    affine_resize(image, angle, (ty, tx), flip, policy.target_size)
}

/// Optional flattening and row window applied before augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Flatten the brightest layer with a fitted quadratic.
    pub flatten: bool,
    /// Keep rows between these fractions of the height after flattening.
    pub row_window: Option<(f64, f64)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            flatten: true,
            // Band region of the synthetic scans: the layer sits near 60% depth
            // once flattened, with the band above it.
            row_window: Some((0.1875, 0.6875)),
        }
    }
}

pub fn preprocess(image: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let mut out = if cfg.flatten {
        flatten(image, estimate_contour(image)?)?
    } else {
        image.clone()
    };
    if let Some((lo, hi)) = cfg.row_window {
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return Err(TincError::invalid(format!("row window ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")));
        }
        let h = out.height() as f64;
        let start = (lo * h).round() as usize;
        let len = ((hi * h).round() as usize).saturating_sub(start);
        let w = out.width();
        let px = out.pixels()[start * w..(start + len) * w].to_vec();
        let meta = out.meta.clone();
        out = Image::new(len, w, px)?;
        out.meta = meta;
    }
    Ok(out)
}

/// Counts over `bins` equal-width bins on [0,1]; 1.0 falls in the last bin.
pub fn histogram(image: &Image, bins: usize) -> Result<Vec<u64>> {
    if bins < 2 {
        return Err(TincError::invalid(format!("histogram needs >= 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; bins];
    for &v in image.pixels() {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}

/// Symmetric χ² distance between two normalized histograms, in [0, 1].
pub fn chi_squared_distance(h1: &[u64], h2: &[u64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(TincError::ShapeMismatch {
            left: format!("{} bins", h1.len()),
            right: format!("{} bins", h2.len()),
        });
    }
    let n1 = h1.iter().sum::<u64>().max(1) as f64;
    let n2 = h2.iter().sum::<u64>().max(1) as f64;
    let mut acc = 0.0;
    for (&a, &b) in h1.iter().zip(h2) {
        let (p, q) = (a as f64 / n1, b as f64 / n2);
        if p + q > 0.0 {
            acc += (p - q).powi(2) / (p + q);
        }
    }
    Ok(0.5 * acc)
}
