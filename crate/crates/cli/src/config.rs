//! Run configuration: preset defaults, overlaid by a JSON file, overlaid by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tinc_core::eval::{EvalConfig, FinetuneConfig};
use tinc_core::nn::ModelConfig;
use tinc_core::synth::SynthConfig;
use tinc_core::trainer::{model_preset, TrainConfig};

use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small CPU-friendly settings.
    #[default]
    Desk,
    /// Published-scale settings (slow on CPU).
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                preset,
                manifest: None,
                out: None,
                synth: SynthConfig::default(),
                train: TrainConfig::desk(),
                model: model_preset(false),
                eval: EvalConfig::default(),
            },
            Preset::Paper => RunConfig {
                preset,
                manifest: None,
                out: None,
                synth: SynthConfig::default(),
                train: TrainConfig::paper(),
                model: model_preset(true),
                eval: EvalConfig {
                    finetune: FinetuneConfig::paper(),
                    ..EvalConfig::default()
                },
            },
        }
    }

    /// Preset (flag, then file, then desk) expanded first, then the file
    /// merged over it key by key. Unknown keys are rejected.
    pub fn resolve(preset_flag: Option<Preset>, file: Option<&Path>) -> Result<Self, CliError> {
        let overlay = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("config {} is not valid JSON: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(CliError::Validation(format!("config {} must be a JSON object", p.display())));
                }
                Some(v)
            }
            None => None,
        };
        let file_preset = match overlay.as_ref().and_then(|v| v.get("preset")) {
            Some(p) => Some(
                serde_json::from_value::<Preset>(p.clone())
                    .map_err(|e| CliError::Validation(format!("invalid preset in config: {e}")))?,
            ),
            None => None,
        };
        let preset = preset_flag.or(file_preset).unwrap_or_default();
        let mut merged = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        if let Some(o) = overlay {
            merge(&mut merged, o);
        }
        merged["preset"] = serde_json::to_value(preset).expect("preset serializes");
        serde_json::from_value(merged).map_err(|e| {
            let origin = file.map_or_else(|| "config".to_string(), |p| p.display().to_string());
            CliError::Validation(format!("{origin}: {e}"))
        })
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// SHA-256 of the experiment settings. Paths are left out so that the
    /// same experiment in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.manifest = None;
        c.out = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        write_file(&dir.join(CONFIG_FILE), text.as_bytes())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}
