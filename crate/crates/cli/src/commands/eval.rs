use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use tinc_core::cohort::DiskImages;
use tinc_core::eval::{evaluate, EvalMode, MetricsReport};
use tinc_core::nn::Model;
use tinc_core::trainer::{model_for_method, Checkpoint, EpochLog, LOSS_LOG_FILE};

use super::load_manifest;
use crate::config::write_file;
use crate::{prepare_out_dir, resolve_config, CliError, GlobalArgs};

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Pretrained checkpoint to evaluate.
    #[arg(long, value_name = "PATH", conflicts_with = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialised encoder instead of a checkpoint.
    #[arg(long)]
    pub random_init: bool,
    /// probe, finetune or both.
    #[arg(long)]
    pub mode: Option<EvalMode>,
    /// Pairs for the Δv probe (0 skips it).
    #[arg(long)]
    pub dv_pairs: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
}

fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>, CliError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => return Ok(Vec::new()),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Validation(format!("malformed loss log {}: {e}", path.display())))
        })
        .collect()
}

pub fn run(global: &GlobalArgs, args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(global)?;
    if let Some(m) = args.mode {
        cfg.eval.mode = m;
    }
    if let Some(v) = args.dv_pairs {
        cfg.eval.dv_pairs = v;
    }
    if let Some(v) = args.probe_epochs {
        cfg.eval.probe.epochs = v;
    }
    if let Some(v) = args.finetune_epochs {
        cfg.eval.finetune.epochs = v;
    }
    if let Some(v) = args.finetune_lr {
        cfg.eval.finetune.lr = v;
    }

    let (model, preprocess, method, loss_log) = match (&args.checkpoint, args.random_init) {
        (Some(path), _) => {
            if !path.exists() {
                return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
            }
            let ckpt = Checkpoint::load(path)?;
            let log = read_loss_log(&path.with_file_name(LOSS_LOG_FILE))?;
            let method = ckpt.train_config.method.to_string();
            // Echo what the checkpoint was actually trained with.
            cfg.model = ckpt.model.config().clone();
            cfg.train = ckpt.train_config.clone();
            (ckpt.model, ckpt.train_config.preprocess, method, log)
        }
        (None, true) => {
            cfg.model = model_for_method(cfg.model.clone(), cfg.train.method);
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            (model, cfg.train.preprocess.clone(), "random_init".to_string(), Vec::new())
        }
        (None, false) => {
            return Err(CliError::Usage("eval needs --checkpoint PATH or --random-init".into()));
        }
    };
    // Fine-tuning augments straight to the network input size.
    cfg.eval.finetune.augment.target_size = model.config().input_size;
    cfg.eval.validate()?;
    let manifest = load_manifest(args.manifest, &mut cfg)?;
    let out = prepare_out_dir(&cfg, global.force)?;
    cfg.write(&out)?;

    let source = DiskImages::new(preprocess);
    let mut report: MetricsReport = evaluate(&model, &manifest, &cfg.eval, &source)?;
    report.config_hash = cfg.hash();
    report.method = Some(method);
    report.loss_log = loss_log;
    let text = serde_json::to_string_pretty(&report).expect("metrics serialize");
    write_file(&out.join(METRICS_FILE), text.as_bytes())?;
    let dv = report.dv_spearman.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "scan_auroc {:.4} scan_prauc {:.4} volume_auroc {:.4} volume_prauc {:.4} dv_spearman {dv} mean_std {:.4} effective_rank {:.2}",
        report.scan_auroc,
        report.scan_prauc,
        report.volume_auroc,
        report.volume_prauc,
        report.collapse.mean_std,
        report.collapse.effective_rank
    );
    println!("metrics {}", out.join(METRICS_FILE).display());
    Ok(())
}
