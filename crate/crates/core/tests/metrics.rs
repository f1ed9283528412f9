use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinc_core::eval::*;
use tinc_core::losses::EmbeddingBatch;
use tinc_core::Matrix;

/// Pairwise count over every positive/negative pair, in exact integer
/// halves.
fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut halves = 0u64;
    let (mut np, mut nn) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                halves += 2;
            } else if scores[i] == scores[j] {
                halves += 1;
            }
        }
    }
    halves as f64 / (2 * np * nn) as f64
}

/// Step integration of the PR curve, one threshold per distinct score.
fn brute_prauc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * tp / predicted;
        prev_recall = recall;
    }
    ap
}

/// Random instance with heavy ties (scores on a coarse grid) and a random
/// class balance, both classes present.
fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=50);
    let levels = rng.random_range(1..=12);
    let p_pos = rng.random_range(0.05..0.95);
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(p_pos)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

#[test]
fn auroc_hand_values() {
    assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
    // One positive above both negatives, one tied with a negative.
    assert_eq!(auroc(&[0.8, 0.5, 0.5, 0.2], &[true, true, false, false]).unwrap(), 0.875);
}

#[test]
fn auroc_single_class_is_undefined() {
    let err = auroc(&[0.1, 0.2], &[true, true]).unwrap_err();
    assert!(err.to_string().contains("AUROC undefined"), "{err}");
    assert!(auroc(&[0.1, 0.2], &[false, false]).is_err());
}

#[test]
fn metrics_reject_bad_inputs() {
    assert!(auroc(&[0.1], &[true, false]).is_err());
    assert!(auroc(&[f64::NAN, 0.1], &[true, false]).is_err());
    assert!(prauc(&[0.1, 0.2], &[false, false]).is_err());
}

#[test]
fn prauc_hand_values() {
    assert_eq!(prauc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(prauc(&[0.5; 5], &[true, false, true, false, false]).unwrap(), 0.4);
    // Ranked +, -, +: precision 1 at the first positive, 2/3 at the second.
    let ap = prauc(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn metrics_match_brute_force_on_random_tied_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let (s, l) = instance(&mut rng);
        assert_eq!(auroc(&s, &l).unwrap(), brute_auroc(&s, &l), "{s:?} {l:?}");
        let (a, b) = (prauc(&s, &l).unwrap(), brute_prauc(&s, &l));
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn volume_score_is_the_max() {
    assert_eq!(volume_score(&[0.2, 0.9, 0.4]).unwrap(), 0.9);
    assert_eq!(volume_score(&[0.4, 0.2, 0.9]).unwrap(), 0.9);
    assert_eq!(volume_score(&[0.37]).unwrap(), 0.37);
    assert!(volume_score(&[]).is_err());
}

#[test]
fn spearman_hand_values() {
    let dv = [0.1, 0.4, 0.2, 0.9, 0.5];
    assert!((spearman(&dv, &dv).unwrap() - 1.0).abs() < 1e-15);
    // A monotone transform changes nothing.
    let cubed: Vec<f64> = dv.iter().map(|v| v * v * v).collect();
    assert!((spearman(&cubed, &dv).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = dv.iter().map(|v| -v).collect();
    assert!((spearman(&neg, &dv).unwrap() + 1.0).abs() < 1e-15);
    assert!(spearman(&[1.0; 5], &dv).is_err());
    assert!(spearman(&[1.0], &[2.0]).is_err());
}

#[test]
fn spearman_of_independent_series_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dv: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
    let dist: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 4.0).collect();
    assert!(spearman(&dist, &dv).unwrap().abs() <= 0.3);
}

#[test]
fn summarize_groups_scans_into_volumes() {
    let scan = |vol: &str, score: f64, label: bool| ScoredScan {
        eye_id: vol.into(),
        volume_id: vol.into(),
        scan_day: 0,
        score,
        label,
    };
    let scored = vec![
        scan("a", 0.9, true),
        scan("a", 0.1, true),
        scan("b", 0.5, false),
        scan("b", 0.2, false),
        scan("c", 0.3, false),
    ];
    let [sa, sp, va, vp] = summarize(&scored).unwrap();
    assert_eq!(sa, brute_auroc(&[0.9, 0.1, 0.5, 0.2, 0.3], &[true, true, false, false, false]));
    assert_eq!(sp, brute_prauc(&[0.9, 0.1, 0.5, 0.2, 0.3], &[true, true, false, false, false]));
    // Volume maxima are 0.9 (+), 0.5, 0.3.
    assert_eq!(va, 1.0);
    assert_eq!(vp, 1.0);
}

#[test]
fn collapse_of_identical_rows() {
    let z = EmbeddingBatch::from_rows(&[[0.4, -1.0, 2.0]; 5]).unwrap();
    let r = collapse_diagnostics(&z).unwrap();
    assert_eq!(r.mean_std, 0.0);
    assert_eq!(r.effective_rank, 1.0);
}

#[test]
fn collapse_of_orthogonal_rows_has_full_rank() {
    // Centred Hadamard columns: all singular values equal.
    let h = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let r = collapse_diagnostics(&EmbeddingBatch::from_rows(&h).unwrap()).unwrap();
    assert!((r.effective_rank - 3.0).abs() < 1e-9, "{}", r.effective_rank);
    // Unbiased std of a ±1 column of 4 is sqrt(4/3).
    for s in &r.per_dim_std {
        assert!((s - (4.0f64 / 3.0).sqrt()).abs() < 1e-14);
    }
}

#[test]
fn collapse_of_rank_one_batch() {
    let z = EmbeddingBatch::from_rows(&[[1.0, 2.0, -1.0], [2.0, 4.0, -2.0], [-3.0, -6.0, 3.0]]).unwrap();
    let r = collapse_diagnostics(&z).unwrap();
    assert!((r.effective_rank - 1.0).abs() < 1e-9);
}

fn random_z(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

/// Orthogonal d×d matrix from Gram–Schmidt on a random basis.
fn random_rotation(d: usize, seed: u64) -> Matrix {
    let a = random_z(d, d, seed ^ 0x5eed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let mut v = a.column(j);
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    Matrix::from_fn(d, d, |r, c| q[c][r])
}

proptest! {
    #[test]
    fn auroc_ignores_strictly_monotone_transforms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = instance(&mut rng);
        let base = auroc(&s, &l).unwrap();
        let t1: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
        let t2: Vec<f64> = s.iter().map(|v| 10.0 * v - 4.0).collect();
        prop_assert_eq!(auroc(&t1, &l).unwrap(), base);
        prop_assert_eq!(auroc(&t2, &l).unwrap(), base);
        let t3: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&t3, &l).unwrap() + base - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_stay_in_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, l) = instance(&mut rng);
        let a = auroc(&s, &l).unwrap();
        let p = prauc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn volume_score_ignores_order(mut v in prop::collection::vec(0.0f64..1.0, 1..20), k in 0usize..20) {
        let base = volume_score(&v).unwrap();
        let k = k % v.len();
        v.rotate_left(k);
        v.reverse();
        prop_assert_eq!(volume_score(&v).unwrap(), base);
    }

    #[test]
    fn effective_rank_ignores_scale_and_rotation(n in 2usize..24, d in 1usize..8, seed in any::<u64>(), scale in 0.01f64..100.0) {
        let z = random_z(n, d, seed);
        let base = collapse_diagnostics(&EmbeddingBatch::new(z.clone()).unwrap()).unwrap();
        prop_assert!(base.effective_rank >= 1.0 && base.effective_rank <= d as f64);
        prop_assert!(base.per_dim_std.iter().all(|s| *s >= 0.0));
        let scaled = collapse_diagnostics(&EmbeddingBatch::new(z.scaled(scale)).unwrap()).unwrap();
        prop_assert!((scaled.effective_rank - base.effective_rank).abs() < 1e-9);
        let rotated = z.matmul(&random_rotation(d, seed));
        let rot = collapse_diagnostics(&EmbeddingBatch::new(rotated).unwrap()).unwrap();
        prop_assert!((rot.effective_rank - base.effective_rank).abs() < 1e-9);
    }
}
