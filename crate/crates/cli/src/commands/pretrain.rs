use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use tinc_core::cohort::{DiskImages, PairMode};
use tinc_core::nn::EncoderKind;
use tinc_core::trainer::{model_for_method, pretrain, Method, CHECKPOINT_FILE, LOSS_LOG_FILE};
use tinc_core::TincError;

use super::load_manifest;
use crate::{prepare_out_dir, resolve_config, CliError, GlobalArgs};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EncoderArg {
    Cnn,
    Mlp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PairModeArg {
    TwoVisits,
    SameScan,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// vicreg, tinc, barlow_twins or vicreg_timehead.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Invariance weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Variance weight.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Covariance weight.
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[arg(long, value_enum)]
    pub pair_mode: Option<PairModeArg>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

pub fn run(global: &GlobalArgs, args: PretrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(global)?;
    let t = &mut cfg.train;
    if let Some(m) = &args.method {
        t.method = m.parse::<Method>()?;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
        t.warmup_epochs = t.warmup_epochs.min(v.saturating_sub(1));
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.base_lr = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.warmup_epochs {
        t.warmup_epochs = v;
    }
    if let Some(v) = args.lambda {
        t.loss.lambda_inv = v;
    }
    if let Some(v) = args.mu {
        t.loss.mu_var = v;
    }
    if let Some(v) = args.nu {
        t.loss.nu_cov = v;
    }
    if let Some(v) = args.gamma {
        t.loss.gamma = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(m) = args.pair_mode {
        t.sampler.mode = match m {
            PairModeArg::TwoVisits => PairMode::TwoVisits,
            PairModeArg::SameScan => PairMode::SameScan,
        };
    }
    if let Some(e) = args.encoder {
        cfg.model.encoder = match e {
            EncoderArg::Cnn => EncoderKind::SmallCnn,
            EncoderArg::Mlp => EncoderKind::Mlp,
        };
    }
    cfg.model = model_for_method(cfg.model.clone(), cfg.train.method);
    cfg.train.validate()?;
    cfg.model.validate()?;
    let manifest = load_manifest(args.manifest, &mut cfg)?;
    let out = prepare_out_dir(&cfg, global.force)?;
    for f in [CHECKPOINT_FILE, LOSS_LOG_FILE] {
        let p = out.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| CliError::Validation(format!("cannot remove {}: {e}", p.display())))?;
        }
    }
    cfg.write(&out)?;
    let source = DiskImages::new(cfg.train.preprocess.clone());
    let result = match pretrain(&manifest, &cfg.train, &cfg.model, &source, Some(&out)) {
        Ok(r) => r,
        Err(TincError::Divergence { step, last_checkpoint }) => {
            let resume = last_checkpoint.map_or_else(|| "none".to_string(), |p| p.display().to_string());
            return Err(CliError::Numerical(format!(
                "training diverged at step {step} (non-finite gradient); last checkpoint: {resume}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    match result.log.last() {
        Some(last) => println!(
            "method {} epochs {} final total {:.6} invariance {:.6} variance {:.6} covariance {:.6} mean_std {:.4}",
            cfg.train.method,
            result.log.len(),
            last.total,
            last.invariance,
            last.variance,
            last.covariance,
            last.mean_std
        ),
        None => println!("method {} epochs 0 (checkpoint at initialization)", cfg.train.method),
    }
    if let Some(p) = result.checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}
