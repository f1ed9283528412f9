//! Downstream protocols: linear probe, fine-tuning and the Δv probe.
//!
//! Training code only ever sees train and validation labels. Test scans are
//! scored blind and their labels are read once, by [`summarize`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, prauc, spearman, volume_score};
use crate::augment::{resize_bilinear, supervised_augment, AugmentPolicy, Image};
use crate::cohort::{supervised_scans, CohortManifest, ImageSource, LabeledScan, PairSampler, SamplerConfig, SplitAssignment, CONVERSION_WINDOW_DAYS};
use crate::error::{Result, TincError};
use crate::linalg::Matrix;
use crate::nn::{Mode, Model};
use crate::optim::{optimizer_step, AdamConfig, AdamState};
use crate::rng::{derive_key, stream, tag};

const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Loss weight of converter scans relative to non-converter scans.
    pub positive_weight: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            lr: 1e-4,
            batch_size: 128,
            positive_weight: 5.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.lr, self.positive_weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub positive_weight: f64,
    pub augment: AugmentPolicy,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 128,
            positive_weight: 5.0,
            augment: AugmentPolicy::supervised((64, 64)),
        }
    }
}

impl FinetuneConfig {
    pub fn paper() -> Self {
        FinetuneConfig {
            epochs: 100,
            augment: AugmentPolicy::supervised((224, 224)),
            ..FinetuneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.lr, self.positive_weight)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TincError::invalid("weight_decay must be finite and >= 0"));
        }
        self.augment.validate()
    }
}

fn check_common(batch_size: usize, lr: f64, positive_weight: f64) -> Result<()> {
    if batch_size == 0 {
        return Err(TincError::invalid("batch_size must be > 0"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TincError::invalid(format!("lr must be finite and >= 0, got {lr}")));
    }
    if !(positive_weight > 0.0 && positive_weight.is_finite()) {
        return Err(TincError::invalid(format!(
            "positive_weight must be > 0, got {positive_weight}"
        )));
    }
    Ok(())
}

/// A scored test scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredScan {
    pub eye_id: String,
    pub volume_id: String,
    pub scan_day: i64,
    pub score: f64,
    pub label: bool,
}

/// Scan-level and volume-level ranking metrics of one protocol, plus the
/// model-selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamMetrics {
    pub scan_auroc: f64,
    pub scan_prauc: f64,
    pub volume_auroc: f64,
    pub volume_prauc: f64,
    pub best_epoch: usize,
    pub val_auroc: Vec<f64>,
    pub train_auroc: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Scan and volume AUROC/PRAUC of scored test scans; a volume takes the
/// highest score among its scans.
pub fn summarize(scored: &[ScoredScan]) -> Result<[f64; 4]> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let mut volumes: BTreeMap<&str, (Vec<f64>, bool)> = BTreeMap::new();
    for s in scored {
        let e = volumes.entry(&s.volume_id).or_default();
        e.0.push(s.score);
        e.1 |= s.label;
    }
    let mut vs = Vec::with_capacity(volumes.len());
    let mut vl = Vec::with_capacity(volumes.len());
    for (scores, label) in volumes.values() {
        vs.push(volume_score(scores)?);
        vl.push(*label);
    }
    Ok([
        auroc(&scores, &labels)?,
        prauc(&scores, &labels)?,
        auroc(&vs, &vl)?,
        prauc(&vs, &vl)?,
    ])
}

/// One logit on top of (standardised) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        LinearHead {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn probabilities(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|r| sigmoid(self.logit(x.row(r)))).collect()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// d(loss)/d(logit) for class-weighted binary cross-entropy, normalised by
/// the summed weights of the batch.
fn weighted_bce_grad(logits: &[f64], labels: &[bool], positive_weight: f64) -> Vec<f64> {
    let weights: Vec<f64> = labels.iter().map(|&l| if l { positive_weight } else { 1.0 }).collect();
    let total: f64 = weights.iter().sum();
    logits
        .iter()
        .zip(labels)
        .zip(&weights)
        .map(|((&s, &y), w)| w * (sigmoid(s) - y as u8 as f64) / total)
        .collect()
}

/// Per-column mean and std of the training features; constant columns
/// keep a unit std.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let mean = x.col_means();
        let c = x.centered();
        let n = x.rows().max(1) as f64;
        let std = (0..x.cols())
            .map(|j| {
                let s = ((0..x.rows()).map(|r| c.get(r, j).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) / self.std[c])
    }
}

/// Result of fitting a head with validation-based epoch selection.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub head: LinearHead,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub val_auroc: Vec<f64>,
}

/// Trains a zero-initialised logistic head with Adam on fixed features and
/// keeps the epoch with the highest validation AUROC (the earliest on ties).
pub fn fit_linear_head(
    train_x: &Matrix,
    train_y: &[bool],
    val_x: &Matrix,
    val_y: &[bool],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<HeadFit> {
    cfg.validate()?;
    if train_x.rows() != train_y.len() || val_x.rows() != val_y.len() || train_x.cols() != val_x.cols() {
        return Err(TincError::ShapeMismatch {
            left: format!("train {} / val {}", train_x.shape_str(), val_x.shape_str()),
            right: format!("{} / {} labels", train_y.len(), val_y.len()),
        });
    }
    if train_x.rows() == 0 {
        return Err(TincError::invalid("no training scans"));
    }
    let d = train_x.cols();
    let mut params = vec![vec![0.0; d], vec![0.0]];
    let mut state = AdamState::new(&params);
    let mut best: Option<(f64, usize, LinearHead)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &[tag::PROBE, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let head = LinearHead {
                weight: params[0].clone(),
                bias: params[1][0],
            };
            let logits: Vec<f64> = batch.iter().map(|&i| head.logit(train_x.row(i))).collect();
            let labels: Vec<bool> = batch.iter().map(|&i| train_y[i]).collect();
            let dl = weighted_bce_grad(&logits, &labels, cfg.positive_weight);
            let mut gw = vec![0.0; d];
            for (&i, g) in batch.iter().zip(&dl) {
                for (acc, v) in gw.iter_mut().zip(train_x.row(i)) {
                    *acc += g * v;
                }
            }
            let gb = dl.iter().sum::<f64>();
            optimizer_step(&mut params, &[gw, vec![gb]], &mut state, cfg.lr, 0.0, AdamConfig::default())?;
        }
        let head = LinearHead {
            weight: params[0].clone(),
            bias: params[1][0],
        };
        let score = auroc(&head.probabilities(val_x), val_y)?;
        history.push(score);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch + 1, head));
        }
    }
    let (best_epoch, head) = match best {
        Some((_, e, h)) => (e, h),
        None => (0, LinearHead::zeros(d)),
    };
    Ok(HeadFit {
        head,
        best_epoch,
        val_auroc: history,
    })
}

fn load_resized(manifest: &CohortManifest, source: &dyn ImageSource, scan: &str, size: (usize, usize)) -> Result<Image> {
    let img = source.load(&manifest.resolve(scan))?;
    if img.size() == size {
        Ok(img)
    } else {
        resize_bilinear(&img, size)
    }
}

/// Frozen representations of the given scans (no augmentation), streamed
/// through the encoder in chunks.
pub fn encode_scans(model: &Model, manifest: &CohortManifest, source: &dyn ImageSource, scans: &[&str]) -> Result<Matrix> {
    let size = model.config().input_size;
    let r = model.config().representation_dim;
    let mut data = Vec::with_capacity(scans.len() * r);
    for chunk in scans.chunks(ENCODE_CHUNK) {
        let images: Vec<Image> = chunk
            .par_iter()
            .map(|s| load_resized(manifest, source, s, size))
            .collect::<Result<_>>()?;
        data.extend(model.encode_eval(&images)?.into_vec());
    }
    Matrix::from_vec(scans.len(), r, data)
}

/// Eval-mode embeddings of the given scans.
pub fn embed_scans(model: &Model, manifest: &CohortManifest, source: &dyn ImageSource, scans: &[&str]) -> Result<Matrix> {
    let y = encode_scans(model, manifest, source, scans)?;
    Ok(model.project(&y, Mode::Eval)?.0)
}

/// Scans of one split, with labels for training splits only.
struct SplitScans {
    scans: Vec<LabeledScan>,
}

impl SplitScans {
    fn new(manifest: &CohortManifest, eyes: &BTreeSet<String>) -> Self {
        SplitScans {
            scans: supervised_scans(manifest, eyes, CONVERSION_WINDOW_DAYS),
        }
    }

    fn paths(&self) -> Vec<&str> {
        self.scans.iter().map(|s| s.scan.as_str()).collect()
    }

    fn labels(&self) -> Vec<bool> {
        self.scans.iter().map(|s| s.label).collect()
    }

    /// Attaches scores; this is where test labels are first read.
    fn score(&self, scores: &[f64]) -> Vec<ScoredScan> {
        self.scans
            .iter()
            .zip(scores)
            .map(|(s, &score)| ScoredScan {
                eye_id: s.eye_id.clone(),
                volume_id: s.volume_id.clone(),
                scan_day: s.day,
                score,
                label: s.label,
            })
            .collect()
    }
}

fn non_empty(split: &SplitScans, name: &str) -> Result<()> {
    if split.scans.is_empty() {
        return Err(TincError::invalid(format!("{name} split has no labelled scans")));
    }
    Ok(())
}

/// Trains a linear layer on frozen representations and scores the test
/// split with the best validation epoch.
pub fn linear_probe(
    model: &Model,
    manifest: &CohortManifest,
    splits: &SplitAssignment,
    cfg: &ProbeConfig,
    seed: u64,
    source: &dyn ImageSource,
) -> Result<DownstreamMetrics> {
    cfg.validate()?;
    let train = SplitScans::new(manifest, &splits.train);
    let val = SplitScans::new(manifest, &splits.val);
    let test = SplitScans::new(manifest, &splits.test);
    for (s, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        non_empty(s, name)?;
    }
    let train_raw = encode_scans(model, manifest, source, &train.paths())?;
    let standardizer = Standardizer::fit(&train_raw);
    let train_x = standardizer.apply(&train_raw);
    let val_x = standardizer.apply(&encode_scans(model, manifest, source, &val.paths())?);
    let train_y = train.labels();
    let fit = fit_linear_head(&train_x, &train_y, &val_x, &val.labels(), cfg, seed)?;
    let train_auroc = auroc(&fit.head.probabilities(&train_x), &train_y)?;
    let test_x = standardizer.apply(&encode_scans(model, manifest, source, &test.paths())?);
    let [scan_auroc, scan_prauc, volume_auroc, volume_prauc] = summarize(&test.score(&fit.head.probabilities(&test_x)))?;
    Ok(DownstreamMetrics {
        scan_auroc,
        scan_prauc,
        volume_auroc,
        volume_prauc,
        best_epoch: fit.best_epoch,
        val_auroc: fit.val_auroc,
        train_auroc,
        n_train: train.scans.len(),
        n_val: val.scans.len(),
        n_test: test.scans.len(),
    })
}

fn head_scores(model: &Model, head: &LinearHead, manifest: &CohortManifest, source: &dyn ImageSource, split: &SplitScans) -> Result<Vec<f64>> {
    let y = encode_scans(model, manifest, source, &split.paths())?;
    Ok(head.probabilities(&y))
}

/// Trains the encoder and a linear head end to end on the conversion task.
/// Each epoch visits one randomly chosen scan per training volume. The
/// projector is not used.
pub fn finetune(
    model: &Model,
    manifest: &CohortManifest,
    splits: &SplitAssignment,
    cfg: &FinetuneConfig,
    seed: u64,
    source: &dyn ImageSource,
) -> Result<DownstreamMetrics> {
    cfg.validate()?;
    if cfg.augment.target_size != model.config().input_size {
        return Err(TincError::IncompatibleCheckpoint(format!(
            "fine-tune augmentation size {:?} does not match model input {:?}",
            cfg.augment.target_size,
            model.config().input_size
        )));
    }
    let train = SplitScans::new(manifest, &splits.train);
    let val = SplitScans::new(manifest, &splits.val);
    let test = SplitScans::new(manifest, &splits.test);
    for (s, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        non_empty(s, name)?;
    }
    let mut volumes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.scans.iter().enumerate() {
        volumes.entry(&s.volume_id).or_default().push(i);
    }
    let volumes: Vec<Vec<usize>> = volumes.into_values().collect();

    let mut model = model.clone();
    let range = model.encoder_param_range();
    let r = model.config().representation_dim;
    let mut head = vec![vec![0.0; r], vec![0.0]];
    let mut enc_state = AdamState::new(&model.params[range.clone()]);
    let mut head_state = AdamState::new(&head);
    let val_y = val.labels();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model, LinearHead)> = None;
    let as_head = |h: &[Vec<f64>]| LinearHead {
        weight: h[0].clone(),
        bias: h[1][0],
    };

    for epoch in 0..cfg.epochs {
        let mut rng = stream(seed, &[tag::FINETUNE, epoch as u64]);
        let mut picks: Vec<usize> = volumes.iter().map(|v| v[rng.random_range(0..v.len())]).collect();
        picks.shuffle(&mut rng);
        for (b, batch) in picks.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let img = source.load(&manifest.resolve(&train.scans[i].scan))?;
                    let mut rng = stream(seed, &[tag::FINETUNE, epoch as u64, b as u64 + 1, slot as u64]);
                    supervised_augment(&img, &cfg.augment, &mut rng)
                })
                .collect::<Result<_>>()?;
            let (y, cache) = model.encode(&images)?;
            let h = as_head(&head);
            let logits: Vec<f64> = (0..y.rows()).map(|k| h.logit(y.row(k))).collect();
            let labels: Vec<bool> = batch.iter().map(|&i| train.scans[i].label).collect();
            let dl = weighted_bce_grad(&logits, &labels, cfg.positive_weight);
            let mut gw = vec![0.0; r];
            let mut dy = Matrix::zeros(y.rows(), r);
            for (k, g) in dl.iter().enumerate() {
                for j in 0..r {
                    gw[j] += g * y.get(k, j);
                    dy.set(k, j, g * h.weight[j]);
                }
            }
            let gb = dl.iter().sum::<f64>();
            let mut grads = model.zero_grads();
            model.encode_backward(&cache, &dy, &mut grads);
            optimizer_step(
                &mut model.params[range.clone()],
                &grads.0[range.clone()],
                &mut enc_state,
                cfg.lr,
                cfg.weight_decay,
                AdamConfig::default(),
            )?;
            optimizer_step(&mut head, &[gw, vec![gb]], &mut head_state, cfg.lr, cfg.weight_decay, AdamConfig::default())?;
        }
        let h = as_head(&head);
        let score = auroc(&head_scores(&model, &h, manifest, source, &val)?, &val_y)?;
        log::info!("finetune epoch {} val auroc {score:.4}", epoch + 1);
        history.push(score);
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            best = Some((score, epoch + 1, model.clone(), h));
        }
    }
    let (best_epoch, model, head) = match best {
        Some((_, e, m, h)) => (e, m, h),
        None => (0, model, as_head(&head)),
    };
    let train_auroc = auroc(&head_scores(&model, &head, manifest, source, &train)?, &train.labels())?;
    let test_scores = head_scores(&model, &head, manifest, source, &test)?;
    let [scan_auroc, scan_prauc, volume_auroc, volume_prauc] = summarize(&test.score(&test_scores))?;
    Ok(DownstreamMetrics {
        scan_auroc,
        scan_prauc,
        volume_auroc,
        volume_prauc,
        best_epoch,
        val_auroc: history,
        train_auroc,
        n_train: train.scans.len(),
        n_val: val.scans.len(),
        n_test: test.scans.len(),
    })
}

/// Minimum number of pairs for a meaningful rank correlation.
pub const MIN_DV_PAIRS: usize = 10;

/// Keeps only the given eyes (patients without any are dropped).
pub fn restrict_manifest(manifest: &CohortManifest, eyes: &BTreeSet<String>) -> CohortManifest {
    let mut out = manifest.clone();
    out.patients.retain_mut(|p| {
        let id = p.id.clone();
        p.eyes.retain(|e| eyes.contains(&crate::cohort::eye_id(&id, e.laterality)));
        !p.eyes.is_empty()
    });
    out
}

/// Spearman correlation between squared embedding distance and scaled
/// visit gap over `n_pairs` freshly drawn, unaugmented pairs. `None` when
/// either series is constant (for example a fully collapsed encoder).
pub fn dv_probe(
    model: &Model,
    manifest: &CohortManifest,
    n_pairs: usize,
    seed: u64,
    sampler: &SamplerConfig,
    source: &dyn ImageSource,
) -> Result<Option<f64>> {
    if n_pairs < MIN_DV_PAIRS {
        return Err(TincError::invalid(format!(
            "dv probe needs at least {MIN_DV_PAIRS} pairs, got {n_pairs}"
        )));
    }
    let sampler = PairSampler::new(manifest, sampler.clone(), derive_key(seed, &[tag::PROBE]))?;
    let eyes = sampler.draw_eyes(0, n_pairs);
    let specs = sampler.batch_specs(0, 0, &eyes)?;
    let first: Vec<&str> = specs.iter().map(|s| s.scan1.as_str()).collect();
    let second: Vec<&str> = specs.iter().map(|s| s.scan2.as_str()).collect();
    let z1 = embed_scans(model, manifest, source, &first)?;
    let z2 = embed_scans(model, manifest, source, &second)?;
    let dist: Vec<f64> = (0..specs.len())
        .map(|i| z1.row(i).iter().zip(z2.row(i)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let dv: Vec<f64> = specs.iter().map(|s| s.dv).collect();
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(&dist) || constant(&dv) {
        return Ok(None);
    }
    spearman(&dist, &dv).map(Some)
}
