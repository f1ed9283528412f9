use std::fs;

use clap::Args;
use tinc_core::synth::generate_cohort;

use crate::{prepare_out_dir, resolve_config, CliError, GlobalArgs};

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub converter_fraction: Option<f64>,
    #[arg(long)]
    pub visits: Option<usize>,
    #[arg(long)]
    pub visit_interval_days: Option<i64>,
    #[arg(long)]
    pub scans_per_visit: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Half-width of the per-visit brightness gain.
    #[arg(long)]
    pub gain_jitter: Option<f64>,
}

pub fn run(global: &GlobalArgs, args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(global)?;
    let s = &mut cfg.synth;
    if let Some(v) = args.patients {
        s.n_patients = v;
    }
    if let Some(v) = args.converter_fraction {
        s.converter_fraction = v;
    }
    if let Some(v) = args.visits {
        s.visits_per_eye = v;
    }
    if let Some(v) = args.visit_interval_days {
        s.visit_interval_days = v;
    }
    if let Some(v) = args.scans_per_visit {
        s.scans_per_visit = v;
    }
    if let Some(v) = args.image_size {
        s.image_size = (v, v);
    }
    if let Some(v) = args.noise_sigma {
        s.noise_sigma = v;
    }
    if let Some(v) = args.gain_jitter {
        s.gain_jitter = v;
    }
    cfg.synth.validate()?;
    let out = prepare_out_dir(&cfg, global.force)?;
    // Stale images from an earlier, larger cohort would otherwise linger.
    let images = out.join("images");
    if images.exists() {
        fs::remove_dir_all(&images).map_err(|e| CliError::Validation(format!("cannot clear {}: {e}", images.display())))?;
    }
    let result = generate_cohort(&cfg.synth, &out)?;
    cfg.manifest = Some(result.manifest_path.clone());
    cfg.write(&out)?;
    let converters = result.truth.values().filter(|t| t.conversion_day.is_some()).count();
    println!(
        "patients {}\neyes {}\nconverters {}\nscans {}\nmanifest {}",
        result.manifest.patients.len(),
        result.manifest.n_eyes(),
        converters,
        result.manifest.n_scans(),
        result.manifest_path.display()
    );
    Ok(())
}
