//! SSL pretraining: method selection, presets, the training loop, loss logs
//! and checkpoints.

mod checkpoint;
mod gradcheck;
mod objective;

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, PreprocessConfig};
use crate::cohort::{CohortManifest, ImageSource, PairMode, PairSampler, SamplerConfig};
use crate::error::{Result, TincError};
use crate::losses::{LossBreakdown, LossConfig, SimilarityVariant};
use crate::nn::{Model, ModelConfig};
use crate::optim::{lr_schedule, optimizer_step, AdamConfig, AdamState};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{end_to_end_check, tiny_model_config};
pub use objective::{evaluate_objective, mean_std, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vicreg,
    Tinc,
    BarlowTwins,
    VicregTimehead,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vicreg, Method::Tinc, Method::BarlowTwins, Method::VicregTimehead];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vicreg => "vicreg",
            Method::Tinc => "tinc",
            Method::BarlowTwins => "barlow_twins",
            Method::VicregTimehead => "vicreg_timehead",
        }
    }

    /// Loss settings actually used: TINC picks a margin variant (plain TINC
    /// unless the squared one was requested); the other methods use MSE
    /// similarity.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let mut cfg = base.clone();
        cfg.similarity_variant = match self {
            Method::Tinc if base.similarity_variant.needs_margin() => base.similarity_variant,
            Method::Tinc => SimilarityVariant::Tinc,
            _ => SimilarityVariant::Mse,
        };
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TincError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                TincError::invalid(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentPolicy,
    pub preprocess: PreprocessConfig,
    pub adam: AdamConfig,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Replace every margin by 0 (diagnostic hook).
    pub force_zero_dv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small CPU-friendly settings.
    pub fn desk() -> Self {
        TrainConfig {
            method: Method::Tinc,
            batch_size: 32,
            base_lr: 2e-3,
            weight_decay: 1e-6,
            epochs: 100,
            warmup_epochs: 5,
            seed: 0,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            augment: AugmentPolicy::ssl((64, 64)),
            preprocess: PreprocessConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            force_zero_dv: false,
        }
    }

    /// Published-scale settings.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            base_lr: 5e-4,
            epochs: 400,
            warmup_epochs: 10,
            augment: AugmentPolicy::ssl((224, 224)),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TincError::invalid(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(TincError::invalid(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TincError::invalid("base_lr and weight_decay must be finite and >= 0"));
        }
        self.loss.validate()?;
        self.sampler.validate()?;
        self.augment.validate()
    }
}

/// Model settings matching a training preset.
pub fn model_preset(paper: bool) -> ModelConfig {
    if paper {
        ModelConfig {
            input_size: (224, 224),
            projector_dims: vec![4096, 4096, 4096],
            ..ModelConfig::default()
        }
    } else {
        ModelConfig::default()
    }
}

/// Default hidden width of the time-difference head.
pub const TIME_HEAD_HIDDEN: usize = 64;

/// Adjusts a model config to the method (adds or removes the time head).
pub fn model_for_method(mut cfg: ModelConfig, method: Method) -> ModelConfig {
    if method == Method::VicregTimehead {
        cfg.time_head_hidden.get_or_insert(TIME_HEAD_HIDDEN);
    } else {
        cfg.time_head_hidden = None;
    }
    cfg
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// Mean per-dimension embedding std, averaged over the two views.
    pub mean_std: f64,
}

/// One line of `losses.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub extra: Option<f64>,
    pub total: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub mean_std: f64,
}

impl EpochLog {
    fn from_steps(epoch: u64, steps: &[StepStats]) -> Self {
        let k = steps.len() as f64;
        let avg = |f: &dyn Fn(&StepStats) -> f64| steps.iter().map(f).sum::<f64>() / k;
        let extra = steps[0].breakdown.extra.map(|_| avg(&|s| s.breakdown.extra.unwrap_or(0.0)));
        EpochLog {
            epoch,
            invariance: avg(&|s| s.breakdown.invariance),
            variance: avg(&|s| s.breakdown.variance),
            covariance: avg(&|s| s.breakdown.covariance),
            extra,
            total: avg(&|s| s.breakdown.total),
            lr: steps.last().expect("non-empty").lr,
            mean_std: avg(&|s| s.mean_std),
        }
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: Model,
    adam: AdamState,
    sampler: PairSampler<'a>,
    source: &'a dyn ImageSource,
    epoch: u64,
    batch: usize,
    plan: Vec<Vec<usize>>,
    partial: Vec<StepStats>,
    steps_per_epoch: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        manifest: &'a CohortManifest,
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        source: &'a dyn ImageSource,
    ) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = model_for_method(model_cfg, cfg.method);
        if cfg.augment.target_size != model_cfg.input_size {
            return Err(TincError::invalid(format!(
                "augmentation target {:?} differs from network input {:?}",
                cfg.augment.target_size, model_cfg.input_size
            )));
        }
        let model = Model::new(model_cfg, cfg.seed)?;
        let adam = AdamState::new(&model.params);
        Self::assemble(manifest, cfg, model, adam, source, 0, 0, Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        manifest: &'a CohortManifest,
        cfg: TrainConfig,
        model: Model,
        adam: AdamState,
        source: &'a dyn ImageSource,
        epoch: u64,
        batch: usize,
        partial: Vec<StepStats>,
    ) -> Result<Self> {
        let sampler = PairSampler::new(manifest, cfg.sampler.clone(), cfg.seed)?;
        let steps_per_epoch = sampler.epoch_batches(0, cfg.batch_size).len() as u64;
        let plan = sampler.epoch_batches(epoch, cfg.batch_size);
        Ok(Trainer {
            cfg,
            model,
            adam,
            sampler,
            source,
            epoch,
            batch,
            plan,
            partial,
            steps_per_epoch,
        })
    }

    /// Continues training from a checkpoint.
    pub fn resume(manifest: &'a CohortManifest, ckpt: Checkpoint, source: &'a dyn ImageSource) -> Result<Self> {
        let Checkpoint {
            train_config,
            model,
            adam,
            rng,
            partial_epoch,
            ..
        } = ckpt;
        if rng.seed != train_config.seed {
            return Err(TincError::IncompatibleCheckpoint("RNG seed differs from the config seed".into()));
        }
        Self::assemble(manifest, train_config, model, adam, source, rng.epoch, rng.batch, partial_epoch)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.cfg.epochs as u64
    }

    pub fn global_step(&self) -> u64 {
        self.adam.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn sampler(&self) -> &PairSampler<'a> {
        &self.sampler
    }

    /// One optimisation step. Returns the epoch summary when the step
    /// completes an epoch.
    pub fn step(&mut self) -> Result<(StepStats, Option<EpochLog>)> {
        let step = self.adam.step;
        let eyes = &self.plan[self.batch];
        let specs = self.sampler.batch_specs(self.epoch, self.batch as u64, eyes)?;
        let mut pairs = self
            .sampler
            .materialize(specs, self.source, &self.cfg.augment, &[self.epoch, self.batch as u64])?;
        if self.cfg.force_zero_dv {
            pairs.dv.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut views = std::mem::take(&mut pairs.x1);
        views.append(&mut pairs.x2);
        let diverged = |_| TincError::Divergence {
            step: step + 1,
            last_checkpoint: None,
        };
        let obj = evaluate_objective(&self.model, self.cfg.method, &self.cfg.loss, &views, &pairs.dv, &pairs.delta_signed)
            .map_err(|e| if e.is_numerical() { diverged(e) } else { e })?;
        let lr = lr_schedule(
            step,
            self.total_steps(),
            self.steps_per_epoch * self.cfg.warmup_epochs as u64,
            self.cfg.base_lr,
        );
        optimizer_step(
            &mut self.model.params,
            &obj.grads.0,
            &mut self.adam,
            lr,
            self.cfg.weight_decay,
            self.cfg.adam,
        )?;
        for cache in &obj.projector_caches {
            self.model.update_running_stats(cache);
        }
        let stats = StepStats {
            step,
            breakdown: obj.breakdown,
            lr,
            mean_std: 0.5 * (mean_std(&obj.z1) + mean_std(&obj.z2)),
        };
        self.partial.push(stats);
        self.batch += 1;
        let mut done = None;
        if self.batch == self.plan.len() {
            done = Some(EpochLog::from_steps(self.epoch, &self.partial));
            self.partial.clear();
            self.epoch += 1;
            self.batch = 0;
            self.plan = self.sampler.epoch_batches(self.epoch, self.cfg.batch_size);
        }
        Ok((stats, done))
    }

    /// Runs steps until the current epoch completes.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        loop {
            if let (_, Some(log)) = self.step()? {
                return Ok(log);
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.adam.step,
            train_config: self.cfg.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.cfg.seed,
                epoch: self.epoch,
                batch: self.batch,
            },
            partial_epoch: self.partial.clone(),
        }
    }
}

pub struct PretrainOutput {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "losses.jsonl";

/// Full pretraining run. With `out_dir` set, the loss log is appended per
/// epoch and checkpoints are written every `checkpoint_every` epochs and at
/// the end. A diverging run stops with an error naming the last checkpoint.
pub fn pretrain(
    manifest: &CohortManifest,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    source: &dyn ImageSource,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    let mut trainer = Trainer::new(manifest, cfg.clone(), model_cfg.clone(), source)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| TincError::io(dir, e))?;
            let p = dir.join(LOSS_LOG_FILE);
            Some((File::create(&p).map_err(|e| TincError::io(&p, e))?, p))
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut last_good: Option<PathBuf> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    info!(
        "pretraining {} for {} epochs x {} steps",
        cfg.method,
        cfg.epochs,
        trainer.steps_per_epoch()
    );
    for epoch in 0..cfg.epochs {
        let entry = match trainer.train_epoch() {
            Ok(e) => e,
            Err(TincError::Divergence { step, .. }) => {
                return Err(TincError::Divergence {
                    step,
                    last_checkpoint: last_good,
                })
            }
            Err(e) => return Err(e),
        };
        info!("epoch {epoch}: total {:.5} mean std {:.4}", entry.total, entry.mean_std);
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|source| TincError::Json { path: p.clone(), source })?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| TincError::io(p.as_path(), e))?;
        }
        log.push(entry);
        if let Some(p) = &ckpt_path {
            let due = cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if due && epoch + 1 < cfg.epochs {
                trainer.checkpoint().save(p)?;
                last_good = Some(p.clone());
            }
        }
    }
    if let Some(p) = &ckpt_path {
        trainer.checkpoint().save(p)?;
    }
    Ok(PretrainOutput {
        model: trainer.into_model(),
        log,
        checkpoint: ckpt_path,
    })
}

/// Trivial-pair sampler settings: both views from one scan.
pub fn same_scan_sampler() -> SamplerConfig {
    SamplerConfig {
        mode: PairMode::SameScan,
        ..SamplerConfig::default()
    }
}
