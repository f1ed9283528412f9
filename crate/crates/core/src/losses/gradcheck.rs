//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::terms::{hinge_pattern, loss_gradient, loss_value, LossKind, LossInputs};
use crate::error::Result;
use crate::linalg::Matrix;

/// Coordinates whose hinge pattern changes within this many steps of the
/// evaluation point are excluded from the comparison.
const HINGE_EXCLUSION_STEPS: f64 = 10.0;

/// Multiple of machine epsilon used to bound roundoff in `f(x ± h)`.
const ROUNDOFF_FACTOR: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// |a − n| / max(|a|, |n|, resolution).
///
/// `resolution` is the smallest gradient magnitude the finite difference can
/// resolve to the requested tolerance; below it the comparison degrades to an
/// absolute one.
pub fn relative_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(resolution)
}

/// Compares `analytic` against central differences of `f` at `inputs`.
///
/// `pattern` returns the activity flags of every kink (hinge, ReLU) in `f`;
/// a coordinate is skipped when the flags at `x ± 10h` differ from those at
/// `x`.
pub fn check_gradients<F, P>(
    f: F,
    pattern: P,
    inputs: &[Matrix],
    analytic: &[Matrix],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix]) -> Result<f64>,
    P: Fn(&[Matrix]) -> Result<Vec<bool>>,
{
    check_gradient_subset(f, pattern, inputs, analytic, step, tolerance, |_, _| true)
}

/// Like [`check_gradients`] but only probes coordinates `(input, index)` for
/// which `select` returns true; the rest count as neither checked nor
/// excluded.
pub fn check_gradient_subset<F, P, S>(
    f: F,
    pattern: P,
    inputs: &[Matrix],
    analytic: &[Matrix],
    step: f64,
    tolerance: f64,
    select: S,
) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix]) -> Result<f64>,
    P: Fn(&[Matrix]) -> Result<Vec<bool>>,
    S: Fn(usize, usize) -> bool,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(inputs.len(), analytic.len());
    let f0 = f(inputs)?;
    let base_pattern = pattern(inputs)?;
    let resolution = ROUNDOFF_FACTOR * f64::EPSILON * (f0.abs() + 1.0) / (step * tolerance);

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[i].shape(), "gradient shape for input {i}");
        let mut report = InputReport {
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for k in 0..inputs[i].as_slice().len() {
            if !select(i, k) {
                continue;
            }
            let x = inputs[i].as_slice()[k];
            let eval_at = |v: f64, work: &mut Vec<Matrix>| -> Result<(f64, Vec<bool>)> {
                work[i].as_mut_slice()[k] = v;
                let out = (f(work)?, pattern(work)?);
                work[i].as_mut_slice()[k] = x;
                Ok(out)
            };
            let wide = HINGE_EXCLUSION_STEPS * step;
            let (_, p_hi) = eval_at(x + wide, &mut work)?;
            let (_, p_lo) = eval_at(x - wide, &mut work)?;
            if p_hi != base_pattern || p_lo != base_pattern {
                report.excluded += 1;
                continue;
            }
            let (f_hi, _) = eval_at(x + step, &mut work)?;
            let (f_lo, _) = eval_at(x - step, &mut work)?;
            let numeric = (f_hi - f_lo) / (2.0 * step);
            let err = relative_error(grad.as_slice()[k], numeric, resolution);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
    Ok(GradCheckReport {
        passed: max_rel_error <= tolerance,
        inputs: reports,
        max_rel_error,
        tolerance,
    })
}

/// Finite-difference check of one loss from this module. Margins and the
/// time-head labels are held constant.
pub fn finite_difference_check(
    kind: LossKind,
    inputs: &LossInputs,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = loss_gradient(kind, inputs)?;
    check_loss_gradient(kind, inputs, &analytic, step, tolerance)
}

/// Compares a caller-supplied gradient of `kind` against central
/// differences. Useful to confirm the check rejects a wrong gradient.
pub fn check_loss_gradient(
    kind: LossKind,
    inputs: &LossInputs,
    analytic: &[Matrix],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let arity = kind.arity();
    let constants = inputs.tensors[arity..].to_vec();
    let rebuild = |xs: &[Matrix]| {
        let mut tensors = xs.to_vec();
        tensors.extend(constants.iter().cloned());
        LossInputs {
            tensors,
            dv: inputs.dv.clone(),
            cfg: inputs.cfg.clone(),
        }
    };
    check_gradients(
        |xs| loss_value(kind, &rebuild(xs)),
        |xs| hinge_pattern(kind, &rebuild(xs)),
        &inputs.tensors[..arity],
        analytic,
        step,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConfig;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> LossInputs {
        let mut r = lcg(seed);
        LossInputs {
            tensors: vec![
                Matrix::from_fn(n, d, |_, _| r()),
                Matrix::from_fn(n, d, |_, _| r()),
            ],
            dv: Some((0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()),
            cfg: LossConfig::default(),
        }
    }

    #[test]
    fn invariance_and_variance_pass_away_from_hinges() {
        let inputs = random_inputs(8, 6, 3);
        let r = finite_difference_check(LossKind::Invariance, &inputs, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        let r = finite_difference_check(LossKind::Variance, &inputs, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.inputs[0].checked > 0);
    }

    #[test]
    fn flat_region_reports_zero_error() {
        let mut inputs = random_inputs(4, 3, 9);
        inputs.tensors[1] = inputs.tensors[0].clone();
        inputs.tensors[1].as_mut_slice()[0] += 0.01;
        inputs.dv = Some(vec![0.5; 4]);
        let r = finite_difference_check(LossKind::Tinc, &inputs, 1e-5, 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        for input in &r.inputs {
            assert_eq!(input.checked + input.excluded, 12);
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let inputs = random_inputs(6, 4, 5);
        let mut g = loss_gradient(LossKind::Covariance, &inputs).unwrap();
        g[0].scale(1.01);
        let r = check_gradients(
            |xs| {
                let mut i = inputs.clone();
                i.tensors[0] = xs[0].clone();
                loss_value(LossKind::Covariance, &i)
            },
            |_| Ok(Vec::new()),
            &inputs.tensors[..1],
            &g,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
