//! Layer-contour fitting and retina flattening.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Result, TincError};

/// `y = a·x² + b·x + c` in pixel units, `x` the column index and `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub const FLAT: Quadratic = Quadratic { a: 0.0, b: 0.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Quadratic { a, b, c }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b) * x + self.c
    }
}

/// Least-squares quadratic through `points`.
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<Quadratic> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(TincError::invalid(format!(
            "quadratic fit needs at least 3 distinct x values, got {}",
            xs.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(TincError::NonFinite("fit points"));
    }
    // Centre and scale x so the design matrix stays well conditioned.
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let sx = points
        .iter()
        .map(|p| (p.0 - mx).abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let design = DMatrix::from_fn(points.len(), 3, |r, c| {
        let u = (points[r].0 - mx) / sx;
        u.powi(2 - c as i32)
    });
    let rhs = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| TincError::invalid(format!("quadratic fit failed: {e}")))?;
    let (p, q, r) = (coef[0], coef[1], coef[2]);
    // y = p·u² + q·u + r with u = (x − mx)/sx
    let a = p / (sx * sx);
    let b = q / sx - 2.0 * p * mx / (sx * sx);
    let c = p * mx * mx / (sx * sx) - q * mx / sx + r;
    Ok(Quadratic { a, b, c })
}

/// Per-column row offsets that bring `contour` to the height of its value at
/// the centre column.
pub fn flatten_shifts(width: usize, contour: Quadratic) -> Vec<i64> {
    let c0 = contour.eval(((width - 1) / 2) as f64);
    (0..width)
        .map(|x| (contour.eval(x as f64) - c0).round() as i64)
        .collect()
}

/// Shifts every column so the contour becomes a horizontal line. Rows that
/// fall outside the source are padded with the nearest edge row.
pub fn flatten(image: &Image, contour: Quadratic) -> Result<Image> {
    let (h, w) = image.size();
    let shifts = flatten_shifts(w, contour);
    if let Some(s) = shifts.iter().find(|s| s.unsigned_abs() as usize >= h) {
        return Err(TincError::invalid(format!(
            "contour out of range: column shift {s} exceeds image height {h}"
        )));
    }
    let mut out = vec![0.0; h * w];
    for (x, &s) in shifts.iter().enumerate() {
        for y in 0..h {
            let src = (y as i64 + s).clamp(0, h as i64 - 1) as usize;
            out[y * w + x] = image.get(src, x);
        }
    }
    Ok(Image::from_parts(h, w, out, image.meta.clone()))
}

/// Row of the brightest response in each column after a [1,2,1] vertical
/// smoothing, i.e. the most likely layer position.
pub fn column_peaks(image: &Image) -> Vec<(f64, f64)> {
    let (h, w) = image.size();
    (0..w)
        .map(|x| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for y in 0..h {
                let up = image.get(y.saturating_sub(1), x);
                let down = image.get((y + 1).min(h - 1), x);
                let v = up + 2.0 * image.get(y, x) + down;
                if v > best.1 {
                    best = (y, v);
                }
            }
            (x as f64, best.0 as f64)
        })
        .collect()
}

/// Fits a quadratic to the column peaks, refitting once without points
/// more than 3 px off the first fit.
pub fn estimate_contour(image: &Image) -> Result<Quadratic> {
    let peaks = column_peaks(image);
    let first = fit_quadratic(&peaks)?;
    let kept: Vec<_> = peaks
        .iter()
        .copied()
        .filter(|&(x, y)| (y - first.eval(x)).abs() <= 3.0)
        .collect();
    match fit_quadratic(&kept) {
        Ok(q) => Ok(q),
        Err(_) => Ok(first),
    }
}
