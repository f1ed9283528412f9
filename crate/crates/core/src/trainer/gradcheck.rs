//! Finite-difference verification of the whole training objective.

use rand::seq::index::sample;
use rand::Rng;

use super::objective::evaluate_objective;
use super::{model_for_method, Method};
use crate::augment::Image;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::losses::{
    barlow_twins_grad, barlow_twins_loss, check_gradient_subset, check_gradients, hinge_pattern,
    time_head_grad, time_head_loss, vicreg_grad, vicreg_loss, EmbeddingBatch, GradCheckReport,
    LossConfig, LossInputs, LossKind,
};
use crate::nn::{EncoderKind, Model, ModelConfig};
use crate::rng::{stream, tag};

/// Tiny network used for end-to-end checks: r = 8, d = 6.
pub fn tiny_model_config(encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder,
        input_size: (32, 32),
        cnn_channels: vec![4, 4, 8],
        mlp_hidden: 12,
        representation_dim: 8,
        projector_dims: vec![10, 10, 6],
        time_head_hidden: None,
    }
}

/// Coordinates probed per parameter tensor.
const COORDS_PER_TENSOR: usize = 12;

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let mut inputs = a.inputs;
    inputs.extend(b.inputs);
    let max_rel_error = a.max_rel_error.max(b.max_rel_error);
    GradCheckReport {
        passed: a.passed && b.passed,
        inputs,
        max_rel_error,
        tolerance: a.tolerance,
    }
}

/// Checks the method's total loss against central differences, both with
/// respect to the projector outputs and to a random subset of every
/// parameter tensor, on a frozen tiny model with `n = 4` pairs.
pub fn end_to_end_check(
    method: Method,
    encoder: EncoderKind,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let n = 4;
    let cfg = model_for_method(tiny_model_config(encoder), method);
    let model = Model::new(cfg.clone(), seed)?;
    let mut rng = stream(seed, &[tag::GRADCHECK]);
    let views: Vec<Image> = (0..2 * n)
        .map(|_| Image::from_fn(32, 32, |_, _| rng.random::<f64>()))
        .collect::<Result<_>>()?;
    let dv: Vec<f64> = (0..n).map(|_| rng.random_range(90.0 / 540.0..=1.0)).collect();
    let delta: Vec<f64> = dv.iter().map(|v| if rng.random::<bool>() { *v } else { -*v }).collect();
    let loss = method.loss_config(&LossConfig::default());

    // Projector-output level.
    let base = evaluate_objective(&model, method, &loss, &views, &dv, &delta)?;
    let z_value = |xs: &[Matrix]| -> Result<(f64, Vec<bool>)> {
        let (e1, e2) = (EmbeddingBatch::new(xs[0].clone())?, EmbeddingBatch::new(xs[1].clone())?);
        let mut pattern = Vec::new();
        let mut total = match method {
            Method::BarlowTwins => barlow_twins_loss(&e1, &e2, loss.lambda_bt, loss.bt_epsilon)?.total,
            _ => {
                let inputs = LossInputs {
                    tensors: xs.to_vec(),
                    dv: Some(dv.clone()),
                    cfg: loss.clone(),
                };
                pattern = hinge_pattern(LossKind::Vicreg, &inputs)?;
                vicreg_loss(&e1, &e2, &loss, Some(&dv))?.total
            }
        };
        if model.has_time_head() {
            let (pred, cache) = model.time_head(&xs[0], &xs[1])?;
            total += time_head_loss(&pred, &delta)?;
            pattern.extend(cache.relu_pattern());
        }
        Ok((total, pattern))
    };
    let (e1, e2) = (EmbeddingBatch::new(base.z1.clone())?, EmbeddingBatch::new(base.z2.clone())?);
    let (_, mut g1, mut g2) = match method {
        Method::BarlowTwins => barlow_twins_grad(&e1, &e2, loss.lambda_bt, loss.bt_epsilon)?,
        _ => vicreg_grad(&e1, &e2, &loss, Some(&dv))?,
    };
    if model.has_time_head() {
        let (pred, cache) = model.time_head(&base.z1, &base.z2)?;
        let mut scratch = model.zero_grads();
        let (h1, h2) = model.time_head_backward(&cache, &time_head_grad(&pred, &delta)?, &mut scratch);
        g1.add_scaled(&h1, 1.0);
        g2.add_scaled(&h2, 1.0);
    }
    let z_report = check_gradients(
        |xs| z_value(xs).map(|v| v.0),
        |xs| z_value(xs).map(|v| v.1),
        &[base.z1.clone(), base.z2.clone()],
        &[g1, g2],
        step,
        tolerance,
    )?;

    // Parameter level.
    let as_rows = |ps: &[Vec<f64>]| -> Vec<Matrix> {
        ps.iter().map(|p| Matrix::from_vec(1, p.len(), p.clone()).expect("row")).collect()
    };
    let with_params = |xs: &[Matrix]| -> Result<super::Objective> {
        let mut m = model.clone();
        for (dst, src) in m.params.iter_mut().zip(xs) {
            dst.copy_from_slice(src.as_slice());
        }
        evaluate_objective(&m, method, &loss, &views, &dv, &delta)
    };
    let chosen: Vec<Vec<bool>> = model
        .params
        .iter()
        .map(|p| {
            let mut mask = vec![false; p.len()];
            for k in sample(&mut rng, p.len(), COORDS_PER_TENSOR.min(p.len())) {
                mask[k] = true;
            }
            mask
        })
        .collect();
    let p_report = check_gradient_subset(
        |xs| with_params(xs).map(|o| o.breakdown.total),
        |xs| with_params(xs).map(|o| o.pattern),
        &as_rows(&model.params),
        &as_rows(&base.grads.0),
        step,
        tolerance,
        |i, k| chosen[i][k],
    )?;
    Ok(merge(z_report, p_report))
}
