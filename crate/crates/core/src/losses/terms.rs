use serde::{Deserialize, Serialize};

use super::{EmbeddingBatch, LossBreakdown, LossConfig, SimilarityVariant};
use crate::error::{Result, TincError};
use crate::linalg::Matrix;

fn same_shape(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<()> {
    if z1.matrix().shape() != z2.matrix().shape() {
        return Err(TincError::ShapeMismatch {
            left: format!("Z1 {}", z1.matrix().shape_str()),
            right: format!("Z2 {}", z2.matrix().shape_str()),
        });
    }
    Ok(())
}

fn check_margins(z: &EmbeddingBatch, dv: &[f64]) -> Result<()> {
    if dv.len() != z.n() {
        return Err(TincError::ShapeMismatch {
            left: format!("dv of length {}", dv.len()),
            right: format!("batch of {} pairs", z.n()),
        });
    }
    if let Some(bad) = dv.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(TincError::invalid(format!("dv entries must lie in [0,1], got {bad}")));
    }
    Ok(())
}

fn require_pairs(z: &EmbeddingBatch, term: &'static str) -> Result<()> {
    if z.n() < 2 {
        return Err(TincError::BatchTooSmall { term, rows: z.n() });
    }
    Ok(())
}

/// Squared distance of each row pair.
fn pair_sq_distances(z1: &Matrix, z2: &Matrix) -> Vec<f64> {
    (0..z1.rows())
        .map(|i| {
            z1.row(i)
                .iter()
                .zip(z2.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect()
}

/// Per-column unbiased variances of an already centred matrix.
fn column_variances(centered: &Matrix) -> Vec<f64> {
    let n = centered.rows();
    let mut var = vec![0.0; centered.cols()];
    for r in 0..n {
        for (acc, v) in var.iter_mut().zip(centered.row(r)) {
            *acc += v * v;
        }
    }
    let denom = (n - 1) as f64;
    var.iter_mut().for_each(|v| *v /= denom);
    var
}

// ---------------------------------------------------------------------------
// values

/// Mean squared distance between paired rows: (1/n) Σ ‖z1ᵢ − z2ᵢ‖².
pub fn invariance_term(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<f64> {
    same_shape(z1, z2)?;
    let d = pair_sq_distances(z1.matrix(), z2.matrix());
    Ok(d.iter().sum::<f64>() / z1.n() as f64)
}

/// Mean over dimensions of max(0, γ − sqrt(var + ε)) with unbiased variance.
pub fn variance_term(z: &EmbeddingBatch, gamma: f64, epsilon: f64) -> Result<f64> {
    require_pairs(z, "variance term")?;
    let var = column_variances(&z.matrix().centered());
    let total: f64 = var
        .iter()
        .map(|v| (gamma - (v + epsilon).sqrt()).max(0.0))
        .sum();
    Ok(total / z.d() as f64)
}

/// Sample covariance with the n−1 divisor.
pub fn covariance_matrix(z: &EmbeddingBatch) -> Result<Matrix> {
    require_pairs(z, "covariance term")?;
    let xc = z.matrix().centered();
    Ok(xc.t_matmul(&xc).scaled(1.0 / (z.n() - 1) as f64))
}

/// Sum of squared off-diagonal covariances divided by d.
pub fn covariance_term(z: &EmbeddingBatch) -> Result<f64> {
    let cov = covariance_matrix(z)?;
    let d = z.d();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                total += cov.get(i, j) * cov.get(i, j);
            }
        }
    }
    Ok(total / d as f64)
}

/// Margin hinge on the squared pair distance: (1/n) Σ max(0, ‖z1ᵢ − z2ᵢ‖² − Δvᵢ).
pub fn tinc_term(z1: &EmbeddingBatch, z2: &EmbeddingBatch, dv: &[f64]) -> Result<f64> {
    same_shape(z1, z2)?;
    check_margins(z1, dv)?;
    let d = pair_sq_distances(z1.matrix(), z2.matrix());
    let total: f64 = d.iter().zip(dv).map(|(s, m)| (s - m).max(0.0)).sum();
    Ok(total / z1.n() as f64)
}

/// Squared hinge variant of [`tinc_term`].
pub fn tinc_squared_term(z1: &EmbeddingBatch, z2: &EmbeddingBatch, dv: &[f64]) -> Result<f64> {
    same_shape(z1, z2)?;
    check_margins(z1, dv)?;
    let d = pair_sq_distances(z1.matrix(), z2.matrix());
    let total: f64 = d
        .iter()
        .zip(dv)
        .map(|(s, m)| {
            let h = (s - m).max(0.0);
            h * h
        })
        .sum();
    Ok(total / z1.n() as f64)
}

fn similarity(
    variant: SimilarityVariant,
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    dv: Option<&[f64]>,
) -> Result<f64> {
    match (variant, dv) {
        (SimilarityVariant::Mse, _) => invariance_term(z1, z2),
        (SimilarityVariant::Tinc, Some(dv)) => tinc_term(z1, z2, dv),
        (SimilarityVariant::TincSquared, Some(dv)) => tinc_squared_term(z1, z2, dv),
        (_, None) => Err(TincError::invalid(
            "time-gap margins (dv) are required for the TINC similarity variants",
        )),
    }
}

/// Weighted VICReg objective with the configured similarity term.
pub fn vicreg_loss(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    cfg: &LossConfig,
    dv: Option<&[f64]>,
) -> Result<LossBreakdown> {
    same_shape(z1, z2)?;
    let invariance = similarity(cfg.similarity_variant, z1, z2, dv)?;
    let variance =
        variance_term(z1, cfg.gamma, cfg.epsilon)? + variance_term(z2, cfg.gamma, cfg.epsilon)?;
    let covariance = covariance_term(z1)? + covariance_term(z2)?;
    let mut out = LossBreakdown {
        total: 0.0,
        invariance,
        variance,
        covariance,
        extra: None,
    };
    out.total = out.recombine_vicreg(cfg);
    Ok(out)
}

/// Per-dimension standardisation used by Barlow Twins: centred columns divided
/// by (biased std + eps). Returns the normalised matrix, the centred matrix and
/// the biased stds.
fn bt_normalize(z: &EmbeddingBatch, eps: f64, view: &str) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let n = z.n() as f64;
    let xc = z.matrix().centered();
    let mut std = vec![0.0; z.d()];
    for r in 0..xc.rows() {
        for (acc, v) in std.iter_mut().zip(xc.row(r)) {
            *acc += v * v;
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s + eps <= 0.0 {
            return Err(TincError::invalid(format!(
                "zero-variance dimension {j} in {view} with bt_epsilon = 0"
            )));
        }
    }
    let mut zn = xc.clone();
    for r in 0..zn.rows() {
        for (v, s) in zn.row_mut(r).iter_mut().zip(&std) {
            *v /= s + eps;
        }
    }
    Ok((zn, xc, std))
}

fn bt_parts(c: &Matrix) -> (f64, f64) {
    let d = c.rows();
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = c.get(i, j);
            if i == j {
                on += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    (on, off)
}

/// Cross-correlation of the two standardised views: (1/n) Ẑ1ᵀ Ẑ2.
pub fn cross_correlation(z1: &EmbeddingBatch, z2: &EmbeddingBatch, eps: f64) -> Result<Matrix> {
    same_shape(z1, z2)?;
    require_pairs(z1, "Barlow Twins")?;
    let (a, _, _) = bt_normalize(z1, eps, "Z1")?;
    let (b, _, _) = bt_normalize(z2, eps, "Z2")?;
    Ok(a.t_matmul(&b).scaled(1.0 / z1.n() as f64))
}

/// Barlow Twins: Σᵢ (1 − Cᵢᵢ)² + λ Σ_{i≠j} Cᵢⱼ².
///
/// `invariance` reports the on-diagonal part and `extra` the unweighted
/// off-diagonal sum.
pub fn barlow_twins_loss(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    lambda_bt: f64,
    eps: f64,
) -> Result<LossBreakdown> {
    let c = cross_correlation(z1, z2, eps)?;
    let (on, off) = bt_parts(&c);
    Ok(LossBreakdown {
        total: on + lambda_bt * off,
        invariance: on,
        variance: 0.0,
        covariance: 0.0,
        extra: Some(off),
    })
}

/// Mean squared error between time-gap predictions and signed labels.
pub fn time_head_loss(pred: &[f64], labels: &[f64]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(TincError::ShapeMismatch {
            left: format!("{} predictions", pred.len()),
            right: format!("{} labels", labels.len()),
        });
    }
    if pred.is_empty() {
        return Err(TincError::invalid("time-head loss needs at least one prediction"));
    }
    let total: f64 = pred.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(total / pred.len() as f64)
}

// ---------------------------------------------------------------------------
// gradients
//
// At a hinge boundary the inactive branch is taken (subgradient 0).

pub fn invariance_grad(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<(Matrix, Matrix)> {
    same_shape(z1, z2)?;
    let g = z1.matrix().sub(z2.matrix()).scaled(2.0 / z1.n() as f64);
    let neg = g.scaled(-1.0);
    Ok((g, neg))
}

pub fn variance_grad(z: &EmbeddingBatch, gamma: f64, epsilon: f64) -> Result<Matrix> {
    require_pairs(z, "variance term")?;
    let n = z.n();
    let d = z.d() as f64;
    let xc = z.matrix().centered();
    let var = column_variances(&xc);
    let coef: Vec<f64> = var
        .iter()
        .map(|v| {
            let std = (v + epsilon).sqrt();
            if gamma - std > 0.0 {
                -1.0 / (d * (n - 1) as f64 * std)
            } else {
                0.0
            }
        })
        .collect();
    let mut g = xc;
    for r in 0..n {
        for (v, c) in g.row_mut(r).iter_mut().zip(&coef) {
            *v *= c;
        }
    }
    Ok(g)
}

pub fn covariance_grad(z: &EmbeddingBatch) -> Result<Matrix> {
    require_pairs(z, "covariance term")?;
    let n = z.n();
    let d = z.d();
    let xc = z.matrix().centered();
    let mut off = xc.t_matmul(&xc).scaled(1.0 / (n - 1) as f64);
    for i in 0..d {
        off.set(i, i, 0.0);
    }
    Ok(xc.matmul(&off).scaled(4.0 / (d as f64 * (n - 1) as f64)))
}

fn hinge_grad(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    dv: &[f64],
    squared: bool,
) -> Result<(Matrix, Matrix)> {
    same_shape(z1, z2)?;
    check_margins(z1, dv)?;
    let n = z1.n() as f64;
    let dist = pair_sq_distances(z1.matrix(), z2.matrix());
    let mut g = z1.matrix().sub(z2.matrix());
    for (i, (s, m)) in dist.iter().zip(dv).enumerate() {
        let h = s - m;
        let coef = if h > 0.0 {
            if squared {
                4.0 * h / n
            } else {
                2.0 / n
            }
        } else {
            0.0
        };
        g.row_mut(i).iter_mut().for_each(|v| *v *= coef);
    }
    let neg = g.scaled(-1.0);
    Ok((g, neg))
}

pub fn tinc_grad(z1: &EmbeddingBatch, z2: &EmbeddingBatch, dv: &[f64]) -> Result<(Matrix, Matrix)> {
    hinge_grad(z1, z2, dv, false)
}

pub fn tinc_squared_grad(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    dv: &[f64],
) -> Result<(Matrix, Matrix)> {
    hinge_grad(z1, z2, dv, true)
}

/// Value and gradients of [`vicreg_loss`].
pub fn vicreg_grad(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    cfg: &LossConfig,
    dv: Option<&[f64]>,
) -> Result<(LossBreakdown, Matrix, Matrix)> {
    let breakdown = vicreg_loss(z1, z2, cfg, dv)?;
    let (mut g1, mut g2) = match (cfg.similarity_variant, dv) {
        (SimilarityVariant::Mse, _) => invariance_grad(z1, z2)?,
        (SimilarityVariant::Tinc, Some(dv)) => tinc_grad(z1, z2, dv)?,
        (SimilarityVariant::TincSquared, Some(dv)) => tinc_squared_grad(z1, z2, dv)?,
        (_, None) => unreachable!("vicreg_loss rejects missing margins"),
    };
    g1.scale(cfg.lambda_inv);
    g2.scale(cfg.lambda_inv);
    g1.add_scaled(&variance_grad(z1, cfg.gamma, cfg.epsilon)?, cfg.mu_var);
    g2.add_scaled(&variance_grad(z2, cfg.gamma, cfg.epsilon)?, cfg.mu_var);
    g1.add_scaled(&covariance_grad(z1)?, cfg.nu_cov);
    g2.add_scaled(&covariance_grad(z2)?, cfg.nu_cov);
    Ok((breakdown, g1, g2))
}

/// Back-propagates a gradient w.r.t. the standardised columns to the raw
/// columns of one view.
fn bt_normalize_backward(gn: &Matrix, xc: &Matrix, std: &[f64], eps: f64) -> Matrix {
    let n = xc.rows();
    let nf = n as f64;
    let mut out = Matrix::zeros(n, xc.cols());
    for j in 0..xc.cols() {
        let s = std[j] + eps;
        let mut g_mean = 0.0;
        let mut g_dot_c = 0.0;
        for r in 0..n {
            g_mean += gn.get(r, j);
            g_dot_c += gn.get(r, j) * xc.get(r, j);
        }
        g_mean /= nf;
        let std_term = if std[j] > 0.0 {
            g_dot_c / (nf * std[j] * s * s)
        } else {
            0.0
        };
        for r in 0..n {
            out.set(r, j, (gn.get(r, j) - g_mean) / s - std_term * xc.get(r, j));
        }
    }
    out
}

/// Value and gradients of [`barlow_twins_loss`].
pub fn barlow_twins_grad(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    lambda_bt: f64,
    eps: f64,
) -> Result<(LossBreakdown, Matrix, Matrix)> {
    same_shape(z1, z2)?;
    require_pairs(z1, "Barlow Twins")?;
    let n = z1.n() as f64;
    let (a, ac, astd) = bt_normalize(z1, eps, "Z1")?;
    let (b, bc, bstd) = bt_normalize(z2, eps, "Z2")?;
    let c = a.t_matmul(&b).scaled(1.0 / n);
    let (on, off) = bt_parts(&c);
    let d = c.rows();
    let gc = Matrix::from_fn(d, d, |i, j| {
        if i == j {
            -2.0 * (1.0 - c.get(i, j))
        } else {
            2.0 * lambda_bt * c.get(i, j)
        }
    });
    let ga = b.matmul_t(&gc).scaled(1.0 / n);
    let gb = a.matmul(&gc).scaled(1.0 / n);
    let breakdown = LossBreakdown {
        total: on + lambda_bt * off,
        invariance: on,
        variance: 0.0,
        covariance: 0.0,
        extra: Some(off),
    };
    Ok((
        breakdown,
        bt_normalize_backward(&ga, &ac, &astd, eps),
        bt_normalize_backward(&gb, &bc, &bstd, eps),
    ))
}

/// Gradient of [`time_head_loss`] w.r.t. the predictions.
pub fn time_head_grad(pred: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    time_head_loss(pred, labels)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(labels).map(|(p, y)| 2.0 * (p - y) / n).collect())
}

// ---------------------------------------------------------------------------
// uniform dispatch, used by the gradient checker and the CLI

/// Identifies one scalar objective of this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Invariance,
    Variance,
    Covariance,
    Tinc,
    TincSquared,
    Vicreg,
    BarlowTwins,
    TimeHead,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Invariance,
        LossKind::Variance,
        LossKind::Covariance,
        LossKind::Tinc,
        LossKind::TincSquared,
        LossKind::Vicreg,
        LossKind::BarlowTwins,
        LossKind::TimeHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Invariance => "invariance",
            LossKind::Variance => "variance",
            LossKind::Covariance => "covariance",
            LossKind::Tinc => "tinc",
            LossKind::TincSquared => "tinc_squared",
            LossKind::Vicreg => "vicreg",
            LossKind::BarlowTwins => "barlow_twins",
            LossKind::TimeHead => "time_head",
        }
    }

    /// Number of leading entries of [`LossInputs::tensors`] that are
    /// differentiated.
    pub fn arity(self) -> usize {
        match self {
            LossKind::Variance | LossKind::Covariance | LossKind::TimeHead => 1,
            _ => 2,
        }
    }
}

/// Operands for [`LossKind`] dispatch.
///
/// `tensors[0]` is Z1 (or the n×1 predictions for the time head);
/// `tensors[1]` is Z2 (or the n×1 labels, held constant). `dv` are the
/// margins, also held constant.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub tensors: Vec<Matrix>,
    pub dv: Option<Vec<f64>>,
    pub cfg: LossConfig,
}

impl LossInputs {
    fn batch(&self, i: usize) -> Result<EmbeddingBatch> {
        let m = self
            .tensors
            .get(i)
            .ok_or_else(|| TincError::invalid(format!("loss input {i} missing")))?;
        EmbeddingBatch::new(m.clone())
    }

    fn margins(&self) -> Result<&[f64]> {
        self.dv
            .as_deref()
            .ok_or_else(|| TincError::invalid("loss requires dv margins"))
    }

    fn time_head_operands(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let pred = self.batch(0)?.into_matrix().into_vec();
        let labels = self.batch(1)?.into_matrix().into_vec();
        Ok((pred, labels))
    }
}

/// Scalar value of the selected loss.
pub fn loss_value(kind: LossKind, inputs: &LossInputs) -> Result<f64> {
    let cfg = &inputs.cfg;
    match kind {
        LossKind::Invariance => invariance_term(&inputs.batch(0)?, &inputs.batch(1)?),
        LossKind::Variance => variance_term(&inputs.batch(0)?, cfg.gamma, cfg.epsilon),
        LossKind::Covariance => covariance_term(&inputs.batch(0)?),
        LossKind::Tinc => tinc_term(&inputs.batch(0)?, &inputs.batch(1)?, inputs.margins()?),
        LossKind::TincSquared => {
            tinc_squared_term(&inputs.batch(0)?, &inputs.batch(1)?, inputs.margins()?)
        }
        LossKind::Vicreg => Ok(vicreg_loss(
            &inputs.batch(0)?,
            &inputs.batch(1)?,
            cfg,
            inputs.dv.as_deref(),
        )?
        .total),
        LossKind::BarlowTwins => Ok(barlow_twins_loss(
            &inputs.batch(0)?,
            &inputs.batch(1)?,
            cfg.lambda_bt,
            cfg.bt_epsilon,
        )?
        .total),
        LossKind::TimeHead => {
            let (p, y) = inputs.time_head_operands()?;
            time_head_loss(&p, &y)
        }
    }
}

/// Analytic gradients, one matrix per differentiated input (see
/// [`LossKind::arity`]).
pub fn loss_gradient(kind: LossKind, inputs: &LossInputs) -> Result<Vec<Matrix>> {
    let cfg = &inputs.cfg;
    let pair = |(a, b): (Matrix, Matrix)| vec![a, b];
    Ok(match kind {
        LossKind::Invariance => pair(invariance_grad(&inputs.batch(0)?, &inputs.batch(1)?)?),
        LossKind::Variance => vec![variance_grad(&inputs.batch(0)?, cfg.gamma, cfg.epsilon)?],
        LossKind::Covariance => vec![covariance_grad(&inputs.batch(0)?)?],
        LossKind::Tinc => pair(tinc_grad(
            &inputs.batch(0)?,
            &inputs.batch(1)?,
            inputs.margins()?,
        )?),
        LossKind::TincSquared => pair(tinc_squared_grad(
            &inputs.batch(0)?,
            &inputs.batch(1)?,
            inputs.margins()?,
        )?),
        LossKind::Vicreg => {
            let (_, a, b) = vicreg_grad(
                &inputs.batch(0)?,
                &inputs.batch(1)?,
                cfg,
                inputs.dv.as_deref(),
            )?;
            vec![a, b]
        }
        LossKind::BarlowTwins => {
            let (_, a, b) = barlow_twins_grad(
                &inputs.batch(0)?,
                &inputs.batch(1)?,
                cfg.lambda_bt,
                cfg.bt_epsilon,
            )?;
            vec![a, b]
        }
        LossKind::TimeHead => {
            let (p, y) = inputs.time_head_operands()?;
            let n = p.len();
            vec![Matrix::from_vec(n, 1, time_head_grad(&p, &y)?)?]
        }
    })
}

/// Hinge activity pattern of the selected loss: one flag per hinge, true when
/// the hinge argument is strictly positive. Losses without hinges return an
/// empty pattern. A change in this pattern under a small perturbation marks a
/// coordinate as hinge-adjacent.
pub fn hinge_pattern(kind: LossKind, inputs: &LossInputs) -> Result<Vec<bool>> {
    let cfg = &inputs.cfg;
    let variance_flags = |z: &EmbeddingBatch| -> Result<Vec<bool>> {
        require_pairs(z, "variance term")?;
        let var = column_variances(&z.matrix().centered());
        Ok(var
            .iter()
            .map(|v| cfg.gamma - (v + cfg.epsilon).sqrt() > 0.0)
            .collect())
    };
    let margin_flags = |z1: &EmbeddingBatch, z2: &EmbeddingBatch, dv: &[f64]| {
        pair_sq_distances(z1.matrix(), z2.matrix())
            .iter()
            .zip(dv)
            .map(|(s, m)| s - m > 0.0)
            .collect::<Vec<_>>()
    };
    Ok(match kind {
        LossKind::Variance => variance_flags(&inputs.batch(0)?)?,
        LossKind::Tinc | LossKind::TincSquared => {
            margin_flags(&inputs.batch(0)?, &inputs.batch(1)?, inputs.margins()?)
        }
        LossKind::Vicreg => {
            let z1 = inputs.batch(0)?;
            let z2 = inputs.batch(1)?;
            let mut flags = variance_flags(&z1)?;
            flags.extend(variance_flags(&z2)?);
            if cfg.similarity_variant.needs_margin() {
                flags.extend(margin_flags(&z1, &z2, inputs.margins()?));
            }
            flags
        }
        _ => Vec::new(),
    })
}
