//! Random resized crop, photometric jitter and the affine warp.

use rand::Rng;

use super::image::Image;
use crate::error::{Result, TincError};

/// Samples the crop rectangle inside `rect` (top, left, h, w) and writes a
/// `target`-sized output with half-pixel-centred bilinear interpolation.
fn resample_rect(image: &Image, rect: (usize, usize, usize, usize), target: (usize, usize)) -> Vec<f64> {
    let (top, left, ch, cw) = rect;
    let (th, tw) = target;
    let sy = ch as f64 / th as f64;
    let sx = cw as f64 / tw as f64;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64) + top as f64;
        for x in 0..tw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64) + left as f64;
            out.push(image.sample(fy, fx));
        }
    }
    out
}

/// Bilinear resize of the whole image.
pub fn resize_bilinear(image: &Image, target: (usize, usize)) -> Result<Image> {
    check_target(target)?;
    if image.size() == target {
        return Ok(image.clone());
    }
    let px = resample_rect(image, (0, 0, image.height(), image.width()), target);
    Ok(Image::from_parts(target.0, target.1, px, image.meta.clone()))
}

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 < super::image::MIN_SIDE || target.1 < super::image::MIN_SIDE {
        return Err(TincError::invalid(format!(
            "target size {}x{} below minimum side {}",
            target.0,
            target.1,
            super::image::MIN_SIDE
        )));
    }
    Ok(())
}

fn check_range(name: &str, (lo, hi): (f64, f64), upper: Option<f64>) -> Result<()> {
    let ok = lo > 0.0 && lo <= hi && hi.is_finite() && upper.is_none_or(|u| hi <= u);
    if ok {
        Ok(())
    } else {
        Err(TincError::invalid(format!("invalid {name} range ({lo}, {hi})")))
    }
}

/// Largest crop whose area ratio lies in `area` and, when possible, whose
/// aspect (w/h) lies in `aspect`; centred.
fn fallback_rect(
    h: usize,
    w: usize,
    area: (f64, f64),
    aspect: (f64, f64),
) -> Option<(usize, usize, usize, usize)> {
    let total = (h * w) as f64;
    let mut best: Option<(usize, usize)> = None;
    for require_aspect in [true, false] {
        for ch in 1..=h {
            let max_w = ((area.1 * total + 1e-9) / ch as f64).floor() as usize;
            let cw = max_w.min(w);
            if cw == 0 {
                continue;
            }
            let ratio = (ch * cw) as f64 / total;
            if ratio < area.0 - 1e-12 {
                continue;
            }
            let a = cw as f64 / ch as f64;
            if require_aspect && !(aspect.0..=aspect.1).contains(&a) {
                continue;
            }
            if best.is_none_or(|(bh, bw)| ch * cw > bh * bw) {
                best = Some((ch, cw));
            }
        }
        if best.is_some() {
            break;
        }
    }
    best.map(|(ch, cw)| ((h - ch) / 2, (w - cw) / 2, ch, cw))
}

/// Chooses a crop rectangle (top, left, h, w) with area ratio in `area`
/// and log-uniform aspect in `aspect`.
pub fn sample_crop_rect<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    area: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> Result<(usize, usize, usize, usize)> {
    check_range("crop area", area, Some(1.0))?;
    check_range("aspect", aspect, None)?;
    let total = (h * w) as f64;
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..10 {
        let target_area = total * uniform(rng, area.0, area.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let cw = (target_area * ratio).sqrt().round() as usize;
        let ch = (target_area / ratio).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        // Rounding can push the realized ratio just outside the range.
        let realized = (ch * cw) as f64 / total;
        if realized < area.0 || realized > area.1 {
            continue;
        }
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        return Ok((top, left, ch, cw));
    }
    fallback_rect(h, w, area, aspect).ok_or_else(|| {
        TincError::invalid(format!(
            "no {h}x{w} crop realizes an area ratio in [{}, {}]",
            area.0, area.1
        ))
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &Image,
    area: (f64, f64),
    aspect: (f64, f64),
    target: (usize, usize),
    rng: &mut R,
) -> Result<Image> {
    check_target(target)?;
    let (h, w) = image.size();
    let rect = sample_crop_rect(h, w, area, aspect, rng)?;
    let px = resample_rect(image, rect, target);
    let mut meta = image.meta.clone();
    meta.crop_rect = Some(rect);
    meta.crop_area_ratio = Some((rect.2 * rect.3) as f64 / (h * w) as f64);
    Ok(Image::from_parts(target.0, target.1, px, meta))
}

pub fn hflip(image: &Image) -> Image {
    let (h, w) = image.size();
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        px.extend((0..w).rev().map(|x| image.get(y, x)));
    }
    let mut meta = image.meta.clone();
    meta.flipped = !meta.flipped;
    Image::from_parts(h, w, px, meta)
}

/// Brightness scale then contrast scale about the mean, clamped to [0,1].
pub fn brightness_contrast(image: &Image, brightness: f64, contrast: f64) -> Image {
    let scaled: Vec<f64> = image.pixels().iter().map(|v| (v * brightness).clamp(0.0, 1.0)).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let px = scaled
        .iter()
        .map(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0))
        .collect();
    Image::from_parts(image.height(), image.width(), px, image.meta.clone())
}

/// Rotation (degrees, about the centre), translation (pixels) and optional
/// mirror, then resize to `target`, all in a single inverse-mapped
/// bilinear pass with edge clamping.
pub fn affine_resize(
    image: &Image,
    rotation_deg: f64,
    translation: (f64, f64),
    flip: bool,
    target: (usize, usize),
) -> Result<Image> {
    check_target(target)?;
    let (h, w) = image.size();
    let (th, tw) = target;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let (ty, tx) = translation;
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut px = Vec::with_capacity(th * tw);
    for y in 0..th {
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..tw {
            let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            // Undo translation, then rotation, then the mirror.
            let (dy, dx) = (v - ty - cy, u - tx - cx);
            let ry = cos * dy - sin * dx + cy;
            let mut rx = sin * dy + cos * dx + cx;
            if flip {
                rx = (w - 1) as f64 - rx;
            }
            px.push(image.sample(ry, rx));
        }
    }
    let mut meta = image.meta.clone();
    meta.rotation_deg = Some(rotation_deg);
    meta.translation_px = Some(translation);
    meta.flipped ^= flip;
    Ok(Image::from_parts(th, tw, px, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp() -> Image {
        Image::from_fn(40, 48, |y, x| (y as f64 * 0.013 + x as f64 * 0.007).min(1.0)).unwrap()
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ramp();
        assert_eq!(resize_bilinear(&img, (40, 48)).unwrap().pixels(), img.pixels());
    }

    #[test]
    fn full_area_crop_is_plain_resize() {
        let img = ramp();
        let mut rng = stream(1, &[0]);
        let aspect = 48.0 / 40.0;
        let out = random_resized_crop(&img, (1.0, 1.0), (aspect, aspect), (32, 32), &mut rng).unwrap();
        assert_eq!(out.meta.crop_rect, Some((0, 0, 40, 48)));
        assert_eq!(out.pixels(), resize_bilinear(&img, (32, 32)).unwrap().pixels());
    }

    #[test]
    fn fallback_stays_in_range() {
        // An aspect range that can never fit forces the fallback path.
        let rect = sample_crop_rect(40, 40, (0.4, 0.8), (50.0, 60.0), &mut stream(3, &[1])).unwrap();
        let ratio = (rect.2 * rect.3) as f64 / 1600.0;
        assert!((0.4..=0.8).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_affine_is_resize() {
        let img = ramp();
        let a = affine_resize(&img, 0.0, (0.0, 0.0), false, (32, 32)).unwrap();
        let b = resize_bilinear(&img, (32, 32)).unwrap();
        for (p, q) in a.pixels().iter().zip(b.pixels()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_flip_matches_hflip() {
        let img = ramp();
        let a = affine_resize(&img, 0.0, (0.0, 0.0), true, (40, 48)).unwrap();
        let b = hflip(&img);
        for (p, q) in a.pixels().iter().zip(b.pixels()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn double_hflip_is_identity() {
        let img = ramp();
        assert_eq!(hflip(&hflip(&img)).pixels(), img.pixels());
    }
}
