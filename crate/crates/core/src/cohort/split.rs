use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{eye_id, CohortManifest};
use crate::error::{Result, TincError};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TincError::invalid(format!(
                "split ratios must be in [0,1] and sum to 1, got {:?}",
                parts
            )));
        }
        Ok(())
    }
}

/// Disjoint eye-id sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratios: SplitRatios,
}

/// Stratified split by converter status. Patients are the unit of
/// assignment so both eyes of a patient always share a split; a patient
/// counts as a converter if any eye converts.
pub fn split_patients(manifest: &CohortManifest, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, p) in manifest.patients.iter().enumerate() {
        if p.eyes.is_empty() {
            continue;
        }
        let converter = p.eyes.iter().any(|e| e.conversion_day.is_some());
        classes[converter as usize].push(i);
    }
    for (c, members) in classes.iter().enumerate() {
        if members.is_empty() {
            return Err(TincError::invalid(format!(
                "cannot stratify: no {} eyes in the cohort",
                if c == 1 { "converter" } else { "non-converter" }
            )));
        }
    }
    let mut out = SplitAssignment {
        train: BTreeSet::new(),
        val: BTreeSet::new(),
        test: BTreeSet::new(),
        ratios,
    };
    for (c, members) in classes.iter_mut().enumerate() {
        // Manifest order is already deterministic; sort by id anyway so the
        // result does not depend on how the file lists patients.
        members.sort_by(|&a, &b| manifest.patients[a].id.cmp(&manifest.patients[b].id));
        members.shuffle(&mut stream(seed, &[tag::SPLIT, c as u64]));
        let k = members.len();
        let n_train = ((k as f64 * ratios.train).round() as usize).min(k);
        let n_val = ((k as f64 * ratios.val).round() as usize).min(k - n_train);
        for (rank, &pi) in members.iter().enumerate() {
            let set = if rank < n_train {
                &mut out.train
            } else if rank < n_train + n_val {
                &mut out.val
            } else {
                &mut out.test
            };
            let p = &manifest.patients[pi];
            for e in &p.eyes {
                set.insert(eye_id(&p.id, e.laterality));
            }
        }
    }
    Ok(out)
}
