use tinc_core::augment::{AugmentPolicy, Image, PreprocessConfig};
use tinc_core::cohort::{CohortManifest, DiskImages};
use tinc_core::nn::{EncoderKind, Mode, Model, ModelConfig};
use tinc_core::optim::{lr_schedule, optimizer_step, AdamConfig, AdamState};
use tinc_core::synth::{generate_cohort, SynthConfig};
use tinc_core::trainer::*;
use tinc_core::TincError;

struct Cohort {
    _dir: tempfile::TempDir,
    manifest: CohortManifest,
}

fn cohort() -> Cohort {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_patients: 12,
        visits_per_eye: 8,
        scans_per_visit: 2,
        image_size: (64, 64),
        converter_fraction: 0.5,
        seed: 3,
        ..SynthConfig::default()
    };
    let manifest = generate_cohort(&cfg, dir.path()).unwrap().manifest;
    Cohort { _dir: dir, manifest }
}

fn tiny_model() -> ModelConfig {
    tiny_model_config(EncoderKind::SmallCnn)
}

fn train_config(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        method,
        batch_size: 6,
        base_lr: 1e-3,
        epochs,
        warmup_epochs: 1,
        seed: 11,
        augment: AugmentPolicy::ssl((32, 32)),
        ..TrainConfig::desk()
    }
}

fn source() -> DiskImages {
    DiskImages::new(PreprocessConfig::default())
}

fn images(n: usize, seed: u64) -> Vec<Image> {
    (0..n)
        .map(|k| Image::from_fn(32, 32, |y, x| (((y * 13 + x * 7) as u64 + seed * 31 + k as u64 * 17) % 101) as f64 / 100.0).unwrap())
        .collect()
}

#[test]
fn schedule_landmarks() {
    let base = 5e-4;
    assert_eq!(lr_schedule(10, 100, 10, base), base);
    assert_eq!(lr_schedule(100, 100, 10, base), 0.0);
    assert!((lr_schedule(55, 100, 10, base) - base / 2.0).abs() < 1e-18);
    assert_eq!(lr_schedule(0, 100, 10, base), 0.0);
    assert!((lr_schedule(5, 100, 10, base) - base / 2.0).abs() < 1e-18);
}

#[test]
fn schedule_is_continuous_then_non_increasing() {
    let (total, warm, base) = (400u64, 40u64, 1e-3);
    let below = lr_schedule(warm - 1, total, warm, base);
    assert!((lr_schedule(warm, total, warm, base) - below) <= base / warm as f64 + 1e-15);
    for s in warm..total {
        assert!(lr_schedule(s + 1, total, warm, base) <= lr_schedule(s, total, warm, base));
    }
}

#[test]
fn adam_without_gradient_or_decay_leaves_params() {
    let mut p = vec![vec![0.3, -1.2], vec![4.0]];
    let before = p.clone();
    let mut st = AdamState::new(&p);
    optimizer_step(&mut p, &[vec![0.0, 0.0], vec![0.0]], &mut st, 1e-2, 0.0, AdamConfig::default()).unwrap();
    assert_eq!(p, before);
}

#[test]
fn decoupled_decay_scales_params() {
    let mut p = vec![vec![0.3, -1.2, 2.0]];
    let mut st = AdamState::new(&p);
    optimizer_step(&mut p, &[vec![0.0; 3]], &mut st, 0.1, 0.01, AdamConfig::default()).unwrap();
    for (a, b) in p[0].iter().zip([0.3, -1.2, 2.0]) {
        assert_eq!(*a, b * (1.0 - 0.1 * 0.01));
    }
}

#[test]
fn adam_matches_hand_recursion() {
    let (g, lr, b1, b2, eps) = (0.7f64, 0.01, 0.9f64, 0.999f64, 1e-8);
    let mut p = vec![vec![1.0]];
    let mut st = AdamState::new(&p);
    let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
    for t in 1..=3 {
        optimizer_step(&mut p, &[vec![g]], &mut st, lr, 0.0, AdamConfig::default()).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        assert!((p[0][0] - x).abs() < 1e-12);
    }
}

#[test]
fn non_finite_gradient_reports_divergence() {
    let mut p = vec![vec![1.0, 2.0]];
    let mut st = AdamState::new(&p);
    let err = optimizer_step(&mut p, &[vec![f64::NAN, 0.0]], &mut st, 0.1, 0.0, AdamConfig::default()).unwrap_err();
    assert!(matches!(err, TincError::Divergence { step: 1, .. }));
    assert!(err.to_string().contains("divergence detected"));
    assert_eq!(p, vec![vec![1.0, 2.0]]);
}

#[test]
fn forward_shapes_and_shared_weights() {
    for encoder in [EncoderKind::SmallCnn, EncoderKind::Mlp] {
        let model = Model::new(tiny_model_config(encoder), 2).unwrap();
        let mut batch = images(3, 1);
        batch.push(batch[0].clone());
        let (y, z) = model.forward(&batch, Mode::Train).unwrap();
        assert_eq!(y.shape(), (4, 8));
        assert_eq!(z.shape(), (4, 6));
        assert_eq!(y.row(0), y.row(3));
    }
}

#[test]
fn eval_forward_is_repeatable_and_batch_independent() {
    let model = Model::new(tiny_model(), 5).unwrap();
    let batch = images(4, 2);
    let (_, a) = model.forward(&batch, Mode::Eval).unwrap();
    let (_, b) = model.forward(&batch, Mode::Eval).unwrap();
    assert_eq!(a, b);
    let (_, single) = model.forward(&batch[1..2], Mode::Eval).unwrap();
    assert_eq!(single.row(0), a.row(1));
}

#[test]
fn single_image_batch_needs_eval_mode() {
    let model = Model::new(tiny_model(), 5).unwrap();
    assert!(model.forward(&images(1, 0), Mode::Train).is_err());
    assert!(model.forward(&images(1, 0), Mode::Eval).is_ok());
}

#[test]
fn wrong_input_size_is_rejected() {
    let model = Model::new(tiny_model(), 5).unwrap();
    let big = vec![Image::from_fn(40, 40, |_, _| 0.5).unwrap(); 2];
    assert!(model.forward(&big, Mode::Train).is_err());
}

#[test]
fn every_method_passes_the_end_to_end_gradient_check() {
    for method in Method::ALL {
        for encoder in [EncoderKind::SmallCnn, EncoderKind::Mlp] {
            let r = end_to_end_check(method, encoder, 4, 1e-5, 1e-4).unwrap();
            assert!(r.passed, "{method} {encoder:?}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    let err = "simclr".parse::<Method>().unwrap_err().to_string();
    assert!(err.contains("tinc") && err.contains("barlow_twins"), "{err}");
}

#[test]
fn training_is_deterministic() {
    let c = cohort();
    let src = source();
    let a = pretrain(&c.manifest, &train_config(Method::Tinc, 2), &tiny_model(), &src, None).unwrap();
    let b = pretrain(&c.manifest, &train_config(Method::Tinc, 2), &tiny_model(), &src, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn tinc_with_zero_margins_follows_vicreg_exactly() {
    let c = cohort();
    let src = source();
    let mut tinc = train_config(Method::Tinc, 3);
    tinc.force_zero_dv = true;
    let a = pretrain(&c.manifest, &tinc, &tiny_model(), &src, None).unwrap();
    let b = pretrain(&c.manifest, &train_config(Method::Vicreg, 3), &tiny_model(), &src, None).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.invariance.to_bits(), y.invariance.to_bits());
    }
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_run() {
    let c = cohort();
    let src = source();
    let cfg = train_config(Method::Tinc, 3);
    let mut straight = Trainer::new(&c.manifest, cfg.clone(), tiny_model(), &src).unwrap();
    let mut split = Trainer::new(&c.manifest, cfg, tiny_model(), &src).unwrap();
    // Stop mid-epoch so the partial-epoch bookkeeping is exercised.
    let k = straight.steps_per_epoch() + 1;
    for _ in 0..k {
        straight.step().unwrap();
        split.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    split.checkpoint().save(&path).unwrap();
    drop(split);
    let mut resumed = Trainer::resume(&c.manifest, Checkpoint::load(&path).unwrap(), &src).unwrap();
    for _ in 0..3 {
        let (a, la) = straight.step().unwrap();
        let (b, lb) = resumed.step().unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }
    assert_eq!(straight.model().params, resumed.model().params);
}

#[test]
fn checkpoint_bytes_round_trip_and_reject_corruption() {
    let c = cohort();
    let src = source();
    let t = Trainer::new(&c.manifest, train_config(Method::VicregTimehead, 2), tiny_model(), &src).unwrap();
    let ck = t.checkpoint();
    let bytes = ck.to_bytes().unwrap();
    assert!(bytes.starts_with(CHECKPOINT_MAGIC));
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong).is_err());
}

#[test]
fn every_method_trains_and_logs_its_terms() {
    let c = cohort();
    let src = source();
    let dir = tempfile::tempdir().unwrap();
    for method in Method::ALL {
        let out_dir = dir.path().join(method.name());
        let out = pretrain(&c.manifest, &train_config(method, 2), &tiny_model(), &src, Some(&out_dir)).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|l| l.total.is_finite()));
        assert_eq!(out.log[0].extra.is_some(), matches!(method, Method::BarlowTwins | Method::VicregTimehead));
        let text = std::fs::read_to_string(out_dir.join(LOSS_LOG_FILE)).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        for key in ["epoch", "invariance", "variance", "covariance", "extra", "total", "lr"] {
            assert!(lines[0].get(key).is_some(), "{method}: missing {key}");
        }
        let ck = Checkpoint::load(&out_dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.model.params, out.model.params);
        assert_eq!(ck.model.has_time_head(), method == Method::VicregTimehead);
    }
}

#[test]
fn tinc_loss_never_exceeds_vicreg_on_the_same_batch() {
    let model = Model::new(tiny_model(), 9).unwrap();
    let views = images(8, 3);
    let dv = [0.2, 0.5, 0.9, 0.3];
    let delta = [0.2, -0.5, 0.9, -0.3];
    let base = tinc_core::losses::LossConfig::default();
    let t = evaluate_objective(&model, Method::Tinc, &Method::Tinc.loss_config(&base), &views, &dv, &delta).unwrap();
    let v = evaluate_objective(&model, Method::Vicreg, &Method::Vicreg.loss_config(&base), &views, &dv, &delta).unwrap();
    assert!(t.breakdown.invariance <= v.breakdown.invariance);
    assert!(t.breakdown.total <= v.breakdown.total);
    assert_eq!(t.breakdown.variance, v.breakdown.variance);
}

#[test]
fn invalid_training_configs_are_rejected() {
    let c = cohort();
    let src = source();
    let mut cfg = train_config(Method::Tinc, 2);
    cfg.warmup_epochs = 2;
    assert!(pretrain(&c.manifest, &cfg, &tiny_model(), &src, None).is_err());
    let mut cfg = train_config(Method::Tinc, 2);
    cfg.batch_size = 1;
    assert!(pretrain(&c.manifest, &cfg, &tiny_model(), &src, None).is_err());
    let mut cfg = train_config(Method::Tinc, 2);
    cfg.augment = AugmentPolicy::ssl((48, 48));
    assert!(pretrain(&c.manifest, &cfg, &tiny_model(), &src, None).is_err());
}

#[test]
fn paper_preset_keeps_published_settings() {
    let t = TrainConfig::paper();
    assert_eq!((t.batch_size, t.epochs, t.warmup_epochs), (128, 400, 10));
    assert_eq!(t.base_lr, 5e-4);
    assert_eq!(t.weight_decay, 1e-6);
    t.validate().unwrap();
    let m = tinc_core::trainer::model_preset(true);
    assert_eq!(m.projector_dims, vec![4096, 4096, 4096]);
    assert_eq!(m.input_size, (224, 224));
}
