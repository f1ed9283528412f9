use std::collections::BTreeSet;

use tinc_core::augment::{AugmentPolicy, PreprocessConfig};
use tinc_core::cohort::{eye_id, split_patients, CohortManifest, DiskImages, SamplerConfig, SplitRatios};
use tinc_core::eval::*;
use tinc_core::linalg::Matrix;
use tinc_core::nn::{EncoderKind, Model};
use tinc_core::rng::stream;
use tinc_core::synth::{generate_cohort, SynthConfig};
use tinc_core::trainer::tiny_model_config;
use rand::Rng;

struct Cohort {
    _dir: tempfile::TempDir,
    manifest: CohortManifest,
}

fn cohort() -> Cohort {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_patients: 20,
        visits_per_eye: 6,
        scans_per_visit: 1,
        image_size: (64, 64),
        converter_fraction: 0.5,
        seed: 8,
        ..SynthConfig::default()
    };
    let manifest = generate_cohort(&cfg, dir.path()).unwrap().manifest;
    Cohort { _dir: dir, manifest }
}

fn source() -> DiskImages {
    DiskImages::new(PreprocessConfig::default())
}

fn model() -> Model {
    Model::new(tiny_model_config(EncoderKind::SmallCnn), 1).unwrap()
}

fn fast_probe() -> ProbeConfig {
    ProbeConfig {
        epochs: 3,
        lr: 1e-2,
        batch_size: 16,
        positive_weight: 5.0,
    }
}

/// Features whose first column is the label plus small noise.
fn separable(n: usize, seed: u64) -> (Matrix, Vec<bool>) {
    let mut rng = stream(seed, &[]);
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let x = Matrix::from_fn(n, 4, |r, c| {
        let noise = rng.random_range(-0.1..0.1);
        if c == 0 {
            labels[r] as u8 as f64 + noise
        } else {
            noise * 10.0
        }
    });
    (x, labels)
}

#[test]
fn head_on_separable_features_ranks_perfectly() {
    let (tx, ty) = separable(90, 1);
    let (vx, vy) = separable(30, 2);
    let fit = fit_linear_head(&tx, &ty, &vx, &vy, &fast_probe(), 0).unwrap();
    assert_eq!(fit.val_auroc.len(), 3);
    assert_eq!(auroc(&fit.head.probabilities(&vx), &vy).unwrap(), 1.0);
    assert!(fit.head.weight[0] > 0.0);
}

#[test]
fn zero_learning_rate_keeps_the_zero_head() {
    let (tx, ty) = separable(30, 3);
    let (vx, vy) = separable(12, 4);
    let cfg = ProbeConfig { lr: 0.0, ..fast_probe() };
    let fit = fit_linear_head(&tx, &ty, &vx, &vy, &cfg, 0).unwrap();
    assert_eq!(fit.head, LinearHead::zeros(4));
    assert_eq!(fit.val_auroc, vec![0.5; 3]);
    // Ties keep the earliest epoch.
    assert_eq!(fit.best_epoch, 1);
}

#[test]
fn head_fit_rejects_mismatched_shapes() {
    let (tx, ty) = separable(10, 5);
    assert!(fit_linear_head(&tx, &ty[..9], &tx, &ty, &fast_probe(), 0).is_err());
    let bad = ProbeConfig { batch_size: 0, ..fast_probe() };
    assert!(fit_linear_head(&tx, &ty, &tx, &ty, &bad, 0).is_err());
}

#[test]
fn standardizer_centres_and_scales_with_biased_std() {
    let x = Matrix::from_rows(&[[1.0, 7.0], [3.0, 7.0], [5.0, 7.0]]);
    let s = Standardizer::fit(&x).apply(&x);
    // Column 0 has mean 3 and population std sqrt(8/3).
    let sd = (8.0f64 / 3.0).sqrt();
    for (r, v) in [1.0, 3.0, 5.0].iter().enumerate() {
        assert!((s.get(r, 0) - (v - 3.0) / sd).abs() < 1e-15);
        assert_eq!(s.get(r, 1), 0.0);
    }
}

#[test]
fn volume_score_is_the_highest_scan_score() {
    let scan = |v: &str, score: f64, label: bool| ScoredScan {
        eye_id: v.into(),
        volume_id: v.into(),
        scan_day: 0,
        score,
        label,
    };
    let scored = [
        scan("a", 0.9, true),
        scan("a", 0.1, true),
        scan("b", 0.5, false),
        scan("b", 0.2, false),
        scan("c", 0.3, false),
    ];
    let [sa, sp, va, vp] = summarize(&scored).unwrap();
    // Scans: positives {0.9, 0.1} against negatives {0.5, 0.2, 0.3}: 3 of 6 pairs won.
    assert_eq!(sa, 0.5);
    // Ranked list 0.9+, 0.5, 0.3, 0.2, 0.1+: precision 1 at recall 1/2, 2/5 at recall 1.
    assert!((sp - (0.5 * 1.0 + 0.5 * 0.4)).abs() < 1e-15);
    assert_eq!(va, 1.0);
    assert_eq!(vp, 1.0);
}

#[test]
fn eval_modes_parse() {
    for m in [EvalMode::Probe, EvalMode::Finetune, EvalMode::Both] {
        assert_eq!(m.to_string().parse::<EvalMode>().unwrap(), m);
    }
    let err = "linear".parse::<EvalMode>().unwrap_err().to_string();
    assert!(err.contains("probe, finetune, both"), "{err}");
}

#[test]
fn restricted_manifest_keeps_only_listed_eyes() {
    let c = cohort();
    let first = &c.manifest.patients[0];
    let keep: BTreeSet<String> = [eye_id(&first.id, first.eyes[0].laterality)].into();
    let sub = restrict_manifest(&c.manifest, &keep);
    assert_eq!(sub.patients.len(), 1);
    assert_eq!(sub.patients[0].eyes.len(), 1);
    assert_eq!(sub.patients[0].eyes[0], first.eyes[0]);
    assert!(restrict_manifest(&c.manifest, &BTreeSet::new()).patients.is_empty());
}

#[test]
fn dv_probe_needs_enough_pairs_and_is_repeatable() {
    let c = cohort();
    let m = model();
    let src = source();
    let sampler = SamplerConfig::default();
    assert!(dv_probe(&m, &c.manifest, MIN_DV_PAIRS - 1, 0, &sampler, &src).is_err());
    let a = dv_probe(&m, &c.manifest, 40, 2, &sampler, &src).unwrap().unwrap();
    let b = dv_probe(&m, &c.manifest, 40, 2, &sampler, &src).unwrap().unwrap();
    assert_eq!(a, b);
    assert!((-1.0..=1.0).contains(&a));
}

#[test]
fn test_labels_never_influence_training() {
    let c = cohort();
    let m = model();
    let src = source();
    let splits = split_patients(&c.manifest, SplitRatios::default(), 0).unwrap();
    let base = linear_probe(&m, &c.manifest, &splits, &fast_probe(), 0, &src).unwrap();

    // Invert the labels of every test eye.
    let mut flipped = c.manifest.clone();
    for p in &mut flipped.patients {
        let pid = p.id.clone();
        for e in &mut p.eyes {
            if splits.test.contains(&eye_id(&pid, e.laterality)) {
                e.conversion_day = match e.conversion_day {
                    Some(_) => None,
                    None => Some(e.visits.last().unwrap().day),
                };
            }
        }
    }
    let other = linear_probe(&m, &flipped, &splits, &fast_probe(), 0, &src).unwrap();
    assert_eq!(base.val_auroc, other.val_auroc);
    assert_eq!(base.best_epoch, other.best_epoch);
    assert_eq!(base.train_auroc, other.train_auroc);
    assert_eq!(base.n_train, other.n_train);
    assert_ne!(base.scan_auroc, other.scan_auroc);
}

#[test]
fn full_evaluation_is_deterministic_and_serialises() {
    let c = cohort();
    let m = model();
    let src = source();
    let cfg = EvalConfig {
        mode: EvalMode::Both,
        probe: fast_probe(),
        finetune: FinetuneConfig {
            epochs: 2,
            batch_size: 8,
            augment: AugmentPolicy::supervised((32, 32)),
            ..FinetuneConfig::default()
        },
        dv_pairs: 20,
        collapse_scans: 16,
        ..EvalConfig::default()
    };
    let a = evaluate(&m, &c.manifest, &cfg, &src).unwrap();
    let b = evaluate(&m, &c.manifest, &cfg, &src).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.scan_auroc, a.probe.as_ref().unwrap().scan_auroc);
    assert!(a.finetune.is_some() && a.dv_spearman.is_some());
    for v in [a.scan_auroc, a.scan_prauc, a.volume_auroc, a.volume_prauc] {
        assert!((0.0..=1.0).contains(&v));
    }
    let json = serde_json::to_string(&a).unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}

#[test]
fn finetune_size_must_match_the_model() {
    let c = cohort();
    let cfg = EvalConfig {
        mode: EvalMode::Finetune,
        finetune: FinetuneConfig {
            epochs: 1,
            augment: AugmentPolicy::supervised((48, 48)),
            ..FinetuneConfig::default()
        },
        dv_pairs: 0,
        ..EvalConfig::default()
    };
    assert!(evaluate(&model(), &c.manifest, &cfg, &source()).is_err());
}

#[test]
fn eval_config_rejects_too_few_dv_pairs() {
    let cfg = EvalConfig { dv_pairs: 5, ..EvalConfig::default() };
    assert!(cfg.validate().is_err());
    assert!(EvalConfig { dv_pairs: 0, ..EvalConfig::default() }.validate().is_ok());
}
