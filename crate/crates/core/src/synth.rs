//! Synthetic longitudinal cohort.
//!
//! Each patient has one eye whose disease state `s(t) ∈ [0,1]` rises along a
//! piecewise-linear trajectory. Scans show a curved bright layer with a
//! textured band above it; band thickness and a dome-shaped lesion grow with
//! `s`. Converters cross `s = 0.8` inside the study window, non-converters
//! stay at or below 0.45.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{write_pgm, Image, Quadratic};
use crate::cohort::{eye_id, CohortManifest, EyeRecord, Laterality, PatientRecord, VisitRecord};
use crate::error::{Result, TincError};
use crate::rng::{stream, tag};

/// Disease state at which an eye counts as converted.
pub const CONVERSION_THRESHOLD: f64 = 0.8;
/// Ceiling for non-converter trajectories.
pub const NON_CONVERTER_CAP: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub visits_per_eye: usize,
    pub visit_interval_days: i64,
    pub scans_per_visit: usize,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub converter_fraction: f64,
    pub noise_sigma: f64,
    /// Per-visit acquisition gain: every scan of a visit is scaled by one
    /// factor drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Progression rate bounds in state units per day.
    pub progression_rate_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 100,
            visits_per_eye: 25,
            visit_interval_days: 30,
            scans_per_visit: 6,
            image_size: (128, 128),
            converter_fraction: 0.25,
            noise_sigma: 0.06,
            gain_jitter: 0.15,
            progression_rate_range: (0.0002, 0.004),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_patients", self.n_patients),
            ("visits_per_eye", self.visits_per_eye),
            ("scans_per_visit", self.scans_per_visit),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TincError::invalid(format!("{name} must be positive")));
            }
        }
        if self.visit_interval_days <= 0 {
            return Err(TincError::invalid("visit_interval_days must be positive"));
        }
        if self.image_size.0 < 64 || self.image_size.1 < 64 {
            return Err(TincError::invalid("synthetic images must be at least 64x64"));
        }
        if !(0.0..=1.0).contains(&self.converter_fraction) {
            return Err(TincError::invalid(format!(
                "converter_fraction must lie in [0,1], got {}",
                self.converter_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TincError::invalid("noise_sigma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.gain_jitter) {
            return Err(TincError::invalid(format!(
                "gain_jitter must lie in [0,1), got {}",
                self.gain_jitter
            )));
        }
        let (lo, hi) = self.progression_rate_range;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(TincError::invalid(format!(
                "progression_rate_range must satisfy 0 <= lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }

    /// Last visit day; the first visit is day 0.
    pub fn study_days(&self) -> i64 {
        (self.visits_per_eye as i64 - 1) * self.visit_interval_days
    }

    pub fn n_converters(&self) -> usize {
        ((self.n_patients as f64 * self.converter_fraction + 0.5).floor() as usize).min(self.n_patients)
    }
}

/// Everything that determines how one eye looks over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    pub patient_index: usize,
    pub base_texture_seed: u64,
    /// Trajectory knots `(day, s)`; `s` is linear between knots and constant
    /// after the last one.
    pub knots: Vec<(i64, f64)>,
    pub converter: bool,
    pub conversion_day: Option<i64>,
    pub contour: Quadratic,
    /// Lesion centre column and half width in pixels.
    pub lesion_center: f64,
    pub lesion_half_width: f64,
    /// Per-eye layer texture phases and frequencies.
    texture: [f64; 4],
}

impl PatientState {
    pub fn progression(&self, day: i64) -> f64 {
        let k = &self.knots;
        if day <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((d0, s0), (d1, s1)) = (w[0], w[1]);
            if day == d1 {
                return s1;
            }
            if day < d1 {
                return s0 + (s1 - s0) * (day - d0) as f64 / (d1 - d0) as f64;
            }
        }
        k[k.len() - 1].1
    }

    /// Rows (r0..r1) and columns (c0..c1) covering the lesion at full
    /// strength, for diagnostics.
    pub fn lesion_region(&self, cfg: &SynthConfig) -> (usize, usize, usize, usize) {
        let (h, _) = cfg.image_size;
        let y = self.contour.eval(self.lesion_center);
        let dome = lesion_height(h);
        let r1 = (y - 2.0).floor() as usize;
        let r0 = (y - 2.0 - 0.7 * dome).ceil() as usize;
        let half = 0.5 * self.lesion_half_width;
        let c0 = (self.lesion_center - half).ceil() as usize;
        let c1 = (self.lesion_center + half).floor() as usize;
        (r0, r1, c0, c1)
    }
}

fn lesion_height(h: usize) -> f64 {
    0.12 * h as f64
}

fn first_day_at(knots: &[(i64, f64)], level: f64) -> Option<i64> {
    for w in knots.windows(2) {
        let ((d0, s0), (d1, s1)) = (w[0], w[1]);
        if s0 >= level {
            return Some(d0);
        }
        if s1 >= level {
            let t = d0 as f64 + (level - s0) / (s1 - s0) * (d1 - d0) as f64;
            // Integer day where the linear interpolation first reaches level.
            let mut day = t.ceil() as i64;
            while day > d0 && s0 + (s1 - s0) * (day - 1 - d0) as f64 / (d1 - d0) as f64 >= level {
                day -= 1;
            }
            while s0 + (s1 - s0) * ((day - d0) as f64) / ((d1 - d0) as f64) < level {
                day += 1;
            }
            return Some(day);
        }
    }
    None
}

/// Builds a trajectory with one random knot, capped at `cap`.
fn trajectory<R: Rng>(rng: &mut R, cfg: &SynthConfig, converter: bool) -> Vec<(i64, f64)> {
    let t_end = cfg.study_days().max(1);
    let (lo, hi) = cfg.progression_rate_range;
    let mid = 0.5 * (lo + hi);
    let s0 = if converter {
        rng.random_range(0.05..0.35)
    } else {
        rng.random_range(0.0..0.3)
    };
    let knot = ((t_end as f64) * rng.random_range(0.15..0.55)).round() as i64;
    let knot = knot.clamp(1, (t_end - 1).max(1));
    let slow = lo * rng.random::<f64>();
    let s_knot = s0 + slow * knot as f64;
    let mut rate = if converter {
        rng.random_range(mid..=hi)
    } else {
        rng.random_range(lo..=mid)
    };
    let cap = if converter { 1.0 } else { NON_CONVERTER_CAP };
    if converter {
        // Guarantee the crossing happens before the last visits.
        let latest = 0.95 * t_end as f64 - knot as f64;
        rate = rate.max((CONVERSION_THRESHOLD - s_knot) / latest.max(1.0));
    }
    let mut knots = vec![(0, s0.min(cap)), (knot, s_knot.min(cap))];
    let s_end = s_knot + rate * (t_end - knot) as f64;
    if s_end > cap && s_knot < cap {
        let d_cap = knot + ((cap - s_knot) / rate).ceil() as i64;
        let d_cap = d_cap.min(t_end);
        knots.push((d_cap, cap));
        if d_cap < t_end {
            knots.push((t_end, cap));
        }
    } else {
        knots.push((t_end, s_end.min(cap)));
    }
    knots.dedup_by(|b, a| a.0 == b.0);
    knots
}

pub fn patient_state(cfg: &SynthConfig, patient_index: usize, converter: bool) -> PatientState {
    let mut rng = stream(cfg.seed, &[tag::SYNTH, 1, patient_index as u64]);
    let knots = trajectory(&mut rng, cfg, converter);
    let conversion_day = if converter {
        first_day_at(&knots, CONVERSION_THRESHOLD)
    } else {
        None
    };
    let (h, w) = cfg.image_size;
    let (hf, wf) = (h as f64, w as f64);
    // Sag of the layer between apex and image edge, in pixels.
    let sag = hf * rng.random_range(0.06..0.14);
    let x0 = wf / 2.0 + rng.random_range(-0.08..0.08) * wf;
    let a = sag / (wf / 2.0).powi(2);
    let y_mid = hf * rng.random_range(0.58..0.64);
    let contour = Quadratic::new(a, -2.0 * a * x0, y_mid + a * x0 * x0);
    PatientState {
        patient_index,
        base_texture_seed: rng.random(),
        knots,
        converter,
        conversion_day,
        contour,
        lesion_center: wf / 2.0 + rng.random_range(-0.1..0.1) * wf,
        lesion_half_width: wf * rng.random_range(0.16..0.22),
        texture: [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(3.0..6.0),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.02..0.06),
        ],
    }
}

/// Renders one scan. Returns the image and the exact layer contour.
pub fn render_scan(
    state: &PatientState,
    day: i64,
    scan_index: usize,
    cfg: &SynthConfig,
) -> (Image, Quadratic) {
    let s = state.progression(day);
    let (h, w) = cfg.image_size;
    let hf = h as f64;
    let thickness = hf * (0.18 + 0.08 * s);
    let dome = lesion_height(h);
    let lesion_amp = 0.35 * s;
    let [phase, freq, phase2, wobble] = state.texture;

    let mut jrng = stream(
        state.base_texture_seed,
        &[tag::SYNTH, 2, scan_index as u64],
    );
    let (jp1, jp2): (f64, f64) = (
        jrng.random_range(0.0..std::f64::consts::TAU),
        jrng.random_range(0.0..std::f64::consts::TAU),
    );
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut nrng = stream(
        cfg.seed,
        &[tag::NOISE, state.patient_index as u64, day as u64, scan_index as u64],
    );

    let gain = if cfg.gain_jitter > 0.0 {
        let mut grng = stream(cfg.seed, &[tag::SYNTH, 3, state.patient_index as u64, day as u64]);
        1.0 + grng.random_range(-cfg.gain_jitter..=cfg.gain_jitter)
    } else {
        1.0
    };

    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        let yf = y as f64;
        for x in 0..w {
            let xf = x as f64;
            let yc = state.contour.eval(xf);
            // Depth above the layer, in pixels (positive inside the band).
            let depth = yc - yf;
            let mut v = 0.06;
            if depth > 0.0 && depth < thickness {
                let u = depth / thickness;
                let layers = 0.08 * (freq * std::f64::consts::TAU * u + phase).sin();
                let lateral = wobble * (xf / w as f64 * 5.0 + phase2).sin();
                v = 0.34 + layers + lateral;
            }
            let dx = (xf - state.lesion_center) / state.lesion_half_width;
            if dx.abs() < 1.0 {
                let top = 2.0 + dome * (1.0 - dx * dx).sqrt();
                if depth >= 2.0 && depth <= top {
                    v += lesion_amp;
                }
            }
            // Bright layer: flat top over three rows with soft tails.
            let rpe = if depth.abs() <= 1.0 {
                0.95
            } else {
                0.95 * (-(depth.abs() - 1.0).powi(2) / 2.0).exp()
            };
            v = v.max(rpe);
            v += 0.025
                * (std::f64::consts::TAU * (xf / w as f64 * 2.0) + jp1).sin()
                * (std::f64::consts::TAU * (yf / hf * 1.5) + jp2).cos();
            v *= gain;
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut nrng);
            }
            px.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    let img = Image::from_fn(h, w, |y, x| px[y * w + x]).expect("synthetic image is valid");
    (img, state.contour)
}

/// Per-eye ground truth written to `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub knots: Vec<(i64, f64)>,
    pub conversion_day: Option<i64>,
    /// Layer contour `[a, b, c]`.
    pub contour: [f64; 3],
}

#[derive(Debug)]
pub struct SynthOutput {
    pub manifest: CohortManifest,
    pub truth: BTreeMap<String, TruthEntry>,
    pub states: Vec<PatientState>,
    pub manifest_path: PathBuf,
}

/// Which patients convert: exactly `n_converters()` of them.
pub fn converter_flags(cfg: &SynthConfig) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..cfg.n_patients).collect();
    idx.shuffle(&mut stream(cfg.seed, &[tag::SYNTH, 0]));
    let mut flags = vec![false; cfg.n_patients];
    for &i in idx.iter().take(cfg.n_converters()) {
        flags[i] = true;
    }
    flags
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:04}")
}

/// Renders the cohort into `out_dir` (images under `images/`, plus
/// `manifest.json` and `truth.json`).
pub fn generate_cohort(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let img_root = out_dir.join("images");
    fs::create_dir_all(&img_root).map_err(|e| TincError::io(&img_root, e))?;
    let flags = converter_flags(cfg);
    let states: Vec<PatientState> = flags
        .iter()
        .enumerate()
        .map(|(i, &c)| patient_state(cfg, i, c))
        .collect();

    let patients: Vec<PatientRecord> = states
        .par_iter()
        .map(|st| -> Result<PatientRecord> {
            let pid = patient_id(st.patient_index);
            let dir = img_root.join(&pid);
            fs::create_dir_all(&dir).map_err(|e| TincError::io(&dir, e))?;
            let mut visits = Vec::with_capacity(cfg.visits_per_eye);
            for v in 0..cfg.visits_per_eye {
                let day = v as i64 * cfg.visit_interval_days;
                let mut scans = Vec::with_capacity(cfg.scans_per_visit);
                for k in 0..cfg.scans_per_visit {
                    let (img, _) = render_scan(st, day, k, cfg);
                    let rel = format!("images/{pid}/v{v:03}_s{k}.pgm");
                    write_pgm(&out_dir.join(&rel), &img)?;
                    scans.push(rel);
                }
                visits.push(VisitRecord {
                    day,
                    volume_id: format!("{pid}:right:v{v:03}"),
                    scans,
                });
            }
            Ok(PatientRecord {
                id: pid,
                eyes: vec![EyeRecord {
                    laterality: Laterality::Right,
                    conversion_day: st.conversion_day,
                    visits,
                }],
            })
        })
        .collect::<Result<_>>()?;

    let mut manifest = CohortManifest {
        patients,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    manifest.base_dir = out_dir.to_path_buf();

    let truth: BTreeMap<String, TruthEntry> = states
        .iter()
        .map(|st| {
            let q = st.contour;
            (
                eye_id(&patient_id(st.patient_index), Laterality::Right),
                TruthEntry {
                    knots: st.knots.clone(),
                    conversion_day: st.conversion_day,
                    contour: [q.a, q.b, q.c],
                },
            )
        })
        .collect();
    let truth_path = out_dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth).map_err(|source| TincError::Json {
        path: truth_path.clone(),
        source,
    })?;
    fs::write(&truth_path, text + "\n").map_err(|e| TincError::io(&truth_path, e))?;

    Ok(SynthOutput {
        manifest,
        truth,
        states,
        manifest_path,
    })
}
