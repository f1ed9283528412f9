use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{scale_time_delta, scale_time_signed, CohortManifest, EyeIndex, ImageSource};
use crate::augment::{AugmentPolicy, Image};
use crate::error::{Result, TincError};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Two scans of one eye from visits whose gap lies in the range.
    #[default]
    TwoVisits,
    /// Both views come from one scan (classic single-image SSL).
    SameScan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub gap_range_days: (i64, i64),
    pub v_min: i64,
    pub v_max: i64,
    pub mode: PairMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            gap_range_days: (90, 540),
            v_min: 0,
            v_max: 540,
            mode: PairMode::TwoVisits,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gap_range_days;
        if lo < 0 || lo > hi {
            return Err(TincError::invalid(format!("invalid gap range [{lo}, {hi}]")));
        }
        scale_time_delta(0, self.v_min, self.v_max).map(|_| ())
    }
}

/// An eye together with its admissible ordered visit pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EligibleEye {
    pub index: EyeIndex,
    pub visit_pairs: Vec<(usize, usize)>,
}

/// Everything needed to load one training pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSpec {
    pub eye_id: String,
    pub patient_id: String,
    pub day1: i64,
    pub day2: i64,
    pub scan1: String,
    pub scan2: String,
    pub dv: f64,
    pub delta_signed: f64,
}

pub struct PairSampler<'a> {
    manifest: &'a CohortManifest,
    cfg: SamplerConfig,
    seed: u64,
    eligible: Vec<EligibleEye>,
}

impl<'a> PairSampler<'a> {
    pub fn new(manifest: &'a CohortManifest, cfg: SamplerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (lo, hi) = cfg.gap_range_days;
        let mut eligible = Vec::new();
        for idx in manifest.eyes() {
            let visits = &manifest.eye(idx).visits;
            let visit_pairs: Vec<_> = match cfg.mode {
                PairMode::SameScan => (0..visits.len()).map(|i| (i, i)).collect(),
                PairMode::TwoVisits => (0..visits.len())
                    .flat_map(|i| (0..visits.len()).map(move |j| (i, j)))
                    .filter(|&(i, j)| {
                        let gap = (visits[i].day - visits[j].day).abs();
                        i != j && gap >= lo && gap <= hi
                    })
                    .collect(),
            };
            if visit_pairs.is_empty() {
                warn!("eye {} has no visit pair with gap in [{lo}, {hi}] days; skipped", manifest.eye_id(idx));
                continue;
            }
            eligible.push(EligibleEye { index: idx, visit_pairs });
        }
        if eligible.is_empty() {
            return Err(TincError::InvalidManifest(format!(
                "no eye has a visit pair with gap in [{lo}, {hi}] days"
            )));
        }
        Ok(PairSampler {
            manifest,
            cfg,
            seed,
            eligible,
        })
    }

    pub fn eligible(&self) -> &[EligibleEye] {
        &self.eligible
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// `count` eligible-eye positions: successive seeded permutations, so no
    /// eye repeats before every eye has been used.
    pub fn draw_eyes(&self, epoch: u64, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut round = 0u64;
        while out.len() < count {
            let mut perm: Vec<usize> = (0..self.eligible.len()).collect();
            perm.shuffle(&mut stream(self.seed, &[tag::EPOCH_ORDER, epoch, round]));
            out.extend(perm.into_iter().take(count - out.len()));
            round += 1;
        }
        out
    }

    /// Eye positions for each batch of an epoch. An epoch visits every
    /// eligible eye once, in batches of near-equal size around
    /// `batch_size`; a cohort smaller than one batch is drawn with
    /// reshuffling up to `batch_size`.
    pub fn epoch_batches(&self, epoch: u64, batch_size: usize) -> Vec<Vec<usize>> {
        let e = self.eligible.len();
        let n = batch_size.max(2);
        if e < n {
            return vec![self.draw_eyes(epoch, n)];
        }
        let mut nb = e.div_ceil(n);
        if e / nb < 2 {
            nb = e / 2;
        }
        let order = self.draw_eyes(epoch, e);
        let (base, extra) = (e / nb, e % nb);
        let mut out = Vec::with_capacity(nb);
        let mut start = 0;
        for b in 0..nb {
            let len = base + usize::from(b < extra);
            out.push(order[start..start + len].to_vec());
            start += len;
        }
        out
    }

    /// Chooses the visit pair and scans for one slot of a batch.
    pub fn pair(&self, eye_pos: usize, stream_path: &[u64]) -> Result<PairSpec> {
        let el = &self.eligible[eye_pos];
        let mut path = vec![tag::PAIR];
        path.extend_from_slice(stream_path);
        let mut rng = stream(self.seed, &path);
        let (i, j) = el.visit_pairs[rng.random_range(0..el.visit_pairs.len())];
        let eye = self.manifest.eye(el.index);
        let (v1, v2) = (&eye.visits[i], &eye.visits[j]);
        let scan1 = v1.scans[rng.random_range(0..v1.scans.len())].clone();
        let scan2 = match self.cfg.mode {
            PairMode::SameScan => scan1.clone(),
            PairMode::TwoVisits => v2.scans[rng.random_range(0..v2.scans.len())].clone(),
        };
        Ok(PairSpec {
            eye_id: self.manifest.eye_id(el.index),
            patient_id: self.manifest.patients[el.index.patient].id.clone(),
            day1: v1.day,
            day2: v2.day,
            scan1,
            scan2,
            dv: scale_time_delta((v1.day - v2.day).abs(), self.cfg.v_min, self.cfg.v_max)?,
            delta_signed: scale_time_signed(v1.day, v2.day, self.cfg.v_max),
        })
    }

    /// Pair specs for batch `batch` of `epoch`.
    pub fn batch_specs(&self, epoch: u64, batch: u64, eyes: &[usize]) -> Result<Vec<PairSpec>> {
        eyes.iter()
            .enumerate()
            .map(|(slot, &e)| self.pair(e, &[epoch, batch, slot as u64]))
            .collect()
    }

    /// Loads and independently augments both views of every pair.
    pub fn materialize(
        &self,
        specs: Vec<PairSpec>,
        source: &dyn ImageSource,
        policy: &AugmentPolicy,
        stream_path: &[u64],
    ) -> Result<PairBatch> {
        let views: Vec<(Image, Image)> = specs
            .par_iter()
            .enumerate()
            .map(|(slot, s)| {
                let view = |scan: &str, which: u64| -> Result<Image> {
                    let img = source.load(&self.manifest.resolve(scan))?;
                    let mut path = vec![tag::PAIR];
                    path.extend_from_slice(stream_path);
                    path.extend([slot as u64, which]);
                    policy.apply(&img, &mut stream(self.seed, &path))
                };
                Ok((view(&s.scan1, 1)?, view(&s.scan2, 2)?))
            })
            .collect::<Result<_>>()?;
        let (x1, x2) = views.into_iter().unzip();
        Ok(PairBatch {
            x1,
            x2,
            dv: specs.iter().map(|s| s.dv).collect(),
            delta_signed: specs.iter().map(|s| s.delta_signed).collect(),
            patient_ids: specs.iter().map(|s| s.patient_id.clone()).collect(),
            specs,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x1: Vec<Image>,
    pub x2: Vec<Image>,
    pub dv: Vec<f64>,
    pub delta_signed: Vec<f64>,
    pub patient_ids: Vec<String>,
    pub specs: Vec<PairSpec>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.dv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dv.is_empty()
    }
}

/// Draws `n` augmented two-visit pairs.
pub fn sample_pair_batch(
    manifest: &CohortManifest,
    n: usize,
    cfg: SamplerConfig,
    seed: u64,
    source: &dyn ImageSource,
    policy: &AugmentPolicy,
) -> Result<PairBatch> {
    let sampler = PairSampler::new(manifest, cfg, seed)?;
    let eyes = sampler.draw_eyes(0, n);
    let specs = sampler.batch_specs(0, 0, &eyes)?;
    sampler.materialize(specs, source, policy, &[0, 0])
}
