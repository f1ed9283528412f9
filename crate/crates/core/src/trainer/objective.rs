//! Forward pass, method loss and full backward pass for one pair batch.

use crate::augment::Image;
use crate::error::{Result, TincError};
use crate::linalg::Matrix;
use crate::losses::{
    barlow_twins_grad, hinge_pattern, time_head_grad, time_head_loss, vicreg_grad, EmbeddingBatch,
    LossBreakdown, LossConfig, LossInputs, LossKind,
};
use crate::nn::{Grads, Mode, Model, ProjectorCache};

use super::Method;

pub struct Objective {
    pub breakdown: LossBreakdown,
    pub grads: Grads,
    pub z1: Matrix,
    pub z2: Matrix,
    pub projector_caches: [ProjectorCache; 2],
    /// Activity flags of every ReLU and loss hinge that was evaluated.
    pub pattern: Vec<bool>,
}

/// Mean over dimensions of the unbiased per-dimension std.
pub fn mean_std(z: &Matrix) -> f64 {
    let n = z.rows() as f64;
    let means = z.col_means();
    let mut var = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for ((acc, v), m) in var.iter_mut().zip(z.row(r)).zip(&means) {
            *acc += (v - m) * (v - m);
        }
    }
    var.iter().map(|s| (s / (n - 1.0)).sqrt()).sum::<f64>() / z.cols() as f64
}

fn split_rows(m: &Matrix, n: usize) -> (Matrix, Matrix) {
    let c = m.cols();
    (
        Matrix::from_vec(n, c, m.as_slice()[..n * c].to_vec()).expect("sized"),
        Matrix::from_vec(m.rows() - n, c, m.as_slice()[n * c..].to_vec()).expect("sized"),
    )
}

/// Evaluates the training objective on `views` (first `n` images are view
/// one, the rest view two) and back-propagates it to every parameter.
pub fn evaluate_objective(
    model: &Model,
    method: Method,
    loss: &LossConfig,
    views: &[Image],
    dv: &[f64],
    delta_signed: &[f64],
) -> Result<Objective> {
    let n = dv.len();
    if views.len() != 2 * n || delta_signed.len() != n {
        return Err(TincError::ShapeMismatch {
            left: format!("{} images", views.len()),
            right: format!("{n} pairs"),
        });
    }
    let (y, ecache) = model.encode(views)?;
    let (y1, y2) = split_rows(&y, n);
    let (z1, pc1) = model.project(&y1, Mode::Train)?;
    let (z2, pc2) = model.project(&y2, Mode::Train)?;
    if !z1.is_finite() || !z2.is_finite() {
        return Err(TincError::NonFinite("embeddings"));
    }
    let e1 = EmbeddingBatch::new(z1.clone())?;
    let e2 = EmbeddingBatch::new(z2.clone())?;
    let mut grads = model.zero_grads();
    let loss_cfg = method.loss_config(loss);

    let (mut breakdown, mut g1, mut g2) = match method {
        Method::BarlowTwins => barlow_twins_grad(&e1, &e2, loss_cfg.lambda_bt, loss_cfg.bt_epsilon)?,
        _ => vicreg_grad(&e1, &e2, &loss_cfg, Some(dv))?,
    };
    let mut pattern = ecache.relu_pattern();
    pattern.extend(pc1.relu_pattern());
    pattern.extend(pc2.relu_pattern());
    if method != Method::BarlowTwins {
        let inputs = LossInputs {
            tensors: vec![z1.clone(), z2.clone()],
            dv: Some(dv.to_vec()),
            cfg: loss_cfg.clone(),
        };
        pattern.extend(hinge_pattern(LossKind::Vicreg, &inputs)?);
    }
    if method == Method::VicregTimehead {
        let (pred, hcache) = model.time_head(&z1, &z2)?;
        let mse = time_head_loss(&pred, delta_signed)?;
        let dpred = time_head_grad(&pred, delta_signed)?;
        let (h1, h2) = model.time_head_backward(&hcache, &dpred, &mut grads);
        g1.add_scaled(&h1, 1.0);
        g2.add_scaled(&h2, 1.0);
        breakdown.extra = Some(mse);
        breakdown.total += mse;
        pattern.extend(hcache.relu_pattern());
    }
    if !breakdown.total.is_finite() {
        return Err(TincError::NonFinite("loss"));
    }
    let dy1 = model.project_backward(&pc1, &g1, &mut grads);
    let dy2 = model.project_backward(&pc2, &g2, &mut grads);
    let r = dy1.cols();
    let mut dy = dy1.into_vec();
    dy.extend(dy2.into_vec());
    model.encode_backward(&ecache, &Matrix::from_vec(2 * n, r, dy)?, &mut grads);
    Ok(Objective {
        breakdown,
        grads,
        z1,
        z2,
        projector_caches: [pc1, pc2],
        pattern,
    })
}
