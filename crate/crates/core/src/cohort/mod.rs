//! Longitudinal cohort model: manifest, time-gap scaling, conversion labels,
//! splits and the two-visit pair sampler.

mod sampler;
mod source;
mod split;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TincError};

pub use sampler::{
    sample_pair_batch, EligibleEye, PairBatch, PairMode, PairSampler, PairSpec, SamplerConfig,
};
pub use source::{DiskImages, ImageSource};
pub use split::{split_patients, SplitAssignment, SplitRatios};

/// Default prediction window: six months.
pub const CONVERSION_WINDOW_DAYS: i64 = 183;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Left,
    Right,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitRecord {
    pub day: i64,
    pub volume_id: String,
    /// Scan paths relative to the manifest directory, one per B-scan.
    pub scans: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeRecord {
    pub laterality: Laterality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion_day: Option<i64>,
    pub visits: Vec<VisitRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub id: String,
    pub eyes: Vec<EyeRecord>,
}

/// Stable identifier of an eye, e.g. `P0007:right`.
pub fn eye_id(patient_id: &str, laterality: Laterality) -> String {
    format!("{patient_id}:{laterality}")
}

/// Position of an eye inside a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EyeIndex {
    pub patient: usize,
    pub eye: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub patients: Vec<PatientRecord>,
    /// Directory scan paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TincError::io(path, e))?;
        let mut m: CohortManifest = serde_json::from_str(&text).map_err(|source| TincError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| TincError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| TincError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TincError::InvalidManifest(m));
        let mut ids = HashSet::new();
        let mut scans = HashSet::new();
        let mut volumes = HashSet::new();
        for p in &self.patients {
            if p.id.is_empty() || !ids.insert(p.id.as_str()) {
                return bad(format!("duplicate or empty patient id {:?}", p.id));
            }
            let mut sides = HashSet::new();
            for e in &p.eyes {
                let eid = eye_id(&p.id, e.laterality);
                if !sides.insert(e.laterality) {
                    return bad(format!("eye {eid} listed twice"));
                }
                if e.visits.is_empty() {
                    return bad(format!("eye {eid} has no visits"));
                }
                for w in e.visits.windows(2) {
                    if w[1].day <= w[0].day {
                        return bad(format!(
                            "eye {eid}: visit days not strictly increasing ({} then {})",
                            w[0].day, w[1].day
                        ));
                    }
                }
                if let Some(c) = e.conversion_day {
                    if c < e.visits[0].day {
                        return bad(format!(
                            "eye {eid}: conversion day {c} precedes first visit {}",
                            e.visits[0].day
                        ));
                    }
                }
                for v in &e.visits {
                    if !volumes.insert(v.volume_id.as_str()) {
                        return bad(format!("duplicate volume id {}", v.volume_id));
                    }
                    if v.scans.is_empty() {
                        return bad(format!("volume {} has no scans", v.volume_id));
                    }
                    for s in &v.scans {
                        if !scans.insert(s.as_str()) {
                            return bad(format!("scan reference {s} appears twice"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn eye(&self, idx: EyeIndex) -> &EyeRecord {
        &self.patients[idx.patient].eyes[idx.eye]
    }

    pub fn eye_id(&self, idx: EyeIndex) -> String {
        let p = &self.patients[idx.patient];
        eye_id(&p.id, p.eyes[idx.eye].laterality)
    }

    /// All eyes in manifest order.
    pub fn eyes(&self) -> impl Iterator<Item = EyeIndex> + '_ {
        self.patients.iter().enumerate().flat_map(|(pi, p)| {
            (0..p.eyes.len()).map(move |ei| EyeIndex { patient: pi, eye: ei })
        })
    }

    pub fn resolve(&self, scan: &str) -> PathBuf {
        self.base_dir.join(scan)
    }

    pub fn n_eyes(&self) -> usize {
        self.patients.iter().map(|p| p.eyes.len()).sum()
    }

    pub fn n_scans(&self) -> usize {
        self.patients
            .iter()
            .flat_map(|p| &p.eyes)
            .flat_map(|e| &e.visits)
            .map(|v| v.scans.len())
            .sum()
    }
}

/// Min-max scaling of an absolute gap, clamped to [0,1].
pub fn scale_time_delta(gap_days: i64, v_min: i64, v_max: i64) -> Result<f64> {
    if v_min >= v_max {
        return Err(TincError::invalid(format!(
            "scaler bounds need v_min < v_max, got {v_min} and {v_max}"
        )));
    }
    Ok(((gap_days - v_min) as f64 / (v_max - v_min) as f64).clamp(0.0, 1.0))
}

/// Signed gap `(v1 − v2)/v_max`, kept in [−1,1].
pub fn scale_time_signed(v1_day: i64, v2_day: i64, v_max: i64) -> f64 {
    ((v1_day - v2_day) as f64 / v_max as f64).clamp(-1.0, 1.0)
}

/// True iff the eye converts strictly after `scan_day` and no later than
/// `window_days` after it.
pub fn label_conversion(scan_day: i64, conversion_day: Option<i64>, window_days: i64) -> bool {
    conversion_day.is_some_and(|c| {
        let gap = c - scan_day;
        gap > 0 && gap <= window_days
    })
}

/// One B-scan of the supervised set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledScan {
    pub eye_id: String,
    pub volume_id: String,
    pub day: i64,
    pub scan: String,
    pub label: bool,
}

/// Scans of the given eyes with conversion labels. Scans taken on or after
/// the conversion day are left out.
pub fn supervised_scans(
    manifest: &CohortManifest,
    eyes: &std::collections::BTreeSet<String>,
    window_days: i64,
) -> Vec<LabeledScan> {
    let mut out = Vec::new();
    for idx in manifest.eyes() {
        let id = manifest.eye_id(idx);
        if !eyes.contains(&id) {
            continue;
        }
        let eye = manifest.eye(idx);
        for v in &eye.visits {
            if eye.conversion_day.is_some_and(|c| v.day >= c) {
                continue;
            }
            let label = label_conversion(v.day, eye.conversion_day, window_days);
            for s in &v.scans {
                out.push(LabeledScan {
                    eye_id: id.clone(),
                    volume_id: v.volume_id.clone(),
                    day: v.day,
                    scan: s.clone(),
                    label,
                });
            }
        }
    }
    out
}
