//! Downstream evaluation: exact ranking metrics, collapse diagnostics, the
//! linear probe, fine-tuning and the Δv probe.

mod metrics;
mod probe;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{split_patients, supervised_scans, CohortManifest, ImageSource, SamplerConfig, SplitRatios, CONVERSION_WINDOW_DAYS};
use crate::error::{Result, TincError};
use crate::losses::EmbeddingBatch;
use crate::nn::Model;
use crate::trainer::EpochLog;

pub use metrics::{auroc, average_ranks, collapse_diagnostics, prauc, spearman, volume_score, CollapseReport};
pub use probe::{
    dv_probe, embed_scans, encode_scans, finetune, fit_linear_head, linear_probe, restrict_manifest, summarize,
    DownstreamMetrics, FinetuneConfig, HeadFit, LinearHead, ProbeConfig, ScoredScan, Standardizer, MIN_DV_PAIRS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Probe,
    Finetune,
    Both,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Probe => "probe",
            EvalMode::Finetune => "finetune",
            EvalMode::Both => "both",
        })
    }
}

impl FromStr for EvalMode {
    type Err = TincError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(EvalMode::Probe),
            "finetune" => Ok(EvalMode::Finetune),
            "both" => Ok(EvalMode::Both),
            _ => Err(TincError::invalid(format!(
                "unknown eval mode '{s}' (valid: probe, finetune, both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub seed: u64,
    pub splits: SplitRatios,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    /// Pairs drawn for the Δv probe (0 skips it).
    pub dv_pairs: usize,
    pub dv_sampler: SamplerConfig,
    /// Test scans embedded for the collapse diagnostics.
    pub collapse_scans: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Probe,
            seed: 0,
            splits: SplitRatios::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            dv_pairs: 500,
            dv_sampler: SamplerConfig::default(),
            collapse_scans: 512,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        self.probe.validate()?;
        self.finetune.validate()?;
        self.dv_sampler.validate()?;
        if self.dv_pairs != 0 && self.dv_pairs < MIN_DV_PAIRS {
            return Err(TincError::invalid(format!(
                "dv_pairs must be 0 or >= {MIN_DV_PAIRS}, got {}",
                self.dv_pairs
            )));
        }
        if self.collapse_scans < 2 {
            return Err(TincError::invalid("collapse_scans must be >= 2"));
        }
        Ok(())
    }
}

/// Everything written to `metrics.json`. The top-level AUROC/PRAUC fields
/// come from the linear probe when it ran, otherwise from fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scan_auroc: f64,
    pub scan_prauc: f64,
    pub volume_auroc: f64,
    pub volume_prauc: f64,
    pub collapse: CollapseReport,
    pub dv_spearman: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<DownstreamMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<DownstreamMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_log: Vec<EpochLog>,
}

/// Runs the configured protocols on a patient-level split. `config_hash`
/// is left empty for the caller to fill in.
pub fn evaluate(model: &Model, manifest: &CohortManifest, cfg: &EvalConfig, source: &dyn ImageSource) -> Result<MetricsReport> {
    cfg.validate()?;
    let splits = split_patients(manifest, cfg.splits, cfg.seed)?;
    let probe = match cfg.mode {
        EvalMode::Probe | EvalMode::Both => Some(linear_probe(model, manifest, &splits, &cfg.probe, cfg.seed, source)?),
        EvalMode::Finetune => None,
    };
    let finetune = match cfg.mode {
        EvalMode::Finetune | EvalMode::Both => Some(probe::finetune(model, manifest, &splits, &cfg.finetune, cfg.seed, source)?),
        EvalMode::Probe => None,
    };
    let headline = probe.as_ref().or(finetune.as_ref()).expect("at least one protocol runs");

    let test_scans = supervised_scans(manifest, &splits.test, CONVERSION_WINDOW_DAYS);
    let stride = test_scans.len().div_ceil(cfg.collapse_scans).max(1);
    let picked: Vec<&str> = test_scans.iter().step_by(stride).map(|s| s.scan.as_str()).collect();
    let z = embed_scans(model, manifest, source, &picked)?;
    let collapse = collapse_diagnostics(&EmbeddingBatch::new(z)?)?;

    let dv_spearman = if cfg.dv_pairs == 0 {
        None
    } else {
        let held_out = splits.val.union(&splits.test).cloned().collect();
        let sub = restrict_manifest(manifest, &held_out);
        dv_probe(model, &sub, cfg.dv_pairs, cfg.seed, &cfg.dv_sampler, source)?
    };

    Ok(MetricsReport {
        scan_auroc: headline.scan_auroc,
        scan_prauc: headline.scan_prauc,
        volume_auroc: headline.volume_auroc,
        volume_prauc: headline.volume_prauc,
        collapse,
        dv_spearman,
        config_hash: String::new(),
        seed: cfg.seed,
        method: None,
        probe,
        finetune,
        loss_log: Vec::new(),
    })
}
