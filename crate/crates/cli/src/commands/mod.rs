pub mod eval;
pub mod gradcheck;
pub mod pretrain;
pub mod report;
pub mod synth;

use std::path::PathBuf;

use tinc_core::cohort::CohortManifest;

use crate::config::RunConfig;
use crate::CliError;

/// Manifest from the flag, else from the config.
pub(crate) fn load_manifest(flag: Option<PathBuf>, cfg: &mut RunConfig) -> Result<CohortManifest, CliError> {
    if let Some(p) = flag {
        cfg.manifest = Some(p);
    }
    let path = cfg
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("--manifest PATH is required".into()))?;
    Ok(CohortManifest::load(&path)?)
}
