//! Non-contrastive SSL objectives.
//!
//! All terms act on an [`EmbeddingBatch`] (n rows of d-dimensional projector
//! outputs). Values and gradients are computed in 64-bit with a fixed
//! summation order, so repeated calls are bit-identical.

mod gradcheck;
mod terms;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TincError};
use crate::linalg::Matrix;

pub use gradcheck::{
    check_gradient_subset, check_gradients, check_loss_gradient, finite_difference_check, relative_error, GradCheckReport, InputReport,
};
pub use terms::*;

/// An n×d batch of embeddings (or representations) with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Matrix);

impl EmbeddingBatch {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(TincError::invalid(format!(
                "embedding batch must be non-empty, got {}",
                data.shape_str()
            )));
        }
        if !data.is_finite() {
            return Err(TincError::NonFinite("embedding batch"));
        }
        Ok(EmbeddingBatch(data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows))
    }

    /// Batch size.
    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// Embedding dimension.
    pub fn d(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl TryFrom<Matrix> for EmbeddingBatch {
    type Error = TincError;

    fn try_from(m: Matrix) -> Result<Self> {
        EmbeddingBatch::new(m)
    }
}

/// Which similarity term sits in the invariance slot of the VICReg objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityVariant {
    /// Plain mean squared distance.
    #[default]
    Mse,
    /// Hinge on squared distance with the scaled time gap as margin.
    Tinc,
    /// Squared hinge variant.
    TincSquared,
}

impl SimilarityVariant {
    pub fn needs_margin(self) -> bool {
        !matches!(self, SimilarityVariant::Mse)
    }
}

/// Weights and constants for every loss in this module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Invariance (similarity) weight.
    pub lambda_inv: f64,
    /// Variance weight.
    pub mu_var: f64,
    /// Covariance weight.
    pub nu_cov: f64,
    /// Target std for the variance hinge.
    pub gamma: f64,
    /// Added to the variance under the square root.
    pub epsilon: f64,
    /// Barlow Twins off-diagonal weight.
    pub lambda_bt: f64,
    /// Added to the per-dimension std in Barlow Twins normalisation.
    pub bt_epsilon: f64,
    pub similarity_variant: SimilarityVariant,
    pub dv_min_days: i64,
    pub dv_max_days: i64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_inv: 25.0,
            mu_var: 5.0,
            nu_cov: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
            lambda_bt: 0.005,
            bt_epsilon: 1e-12,
            similarity_variant: SimilarityVariant::Mse,
            dv_min_days: 0,
            dv_max_days: 540,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_inv", self.lambda_inv),
            ("mu_var", self.mu_var),
            ("nu_cov", self.nu_cov),
            ("lambda_bt", self.lambda_bt),
            ("bt_epsilon", self.bt_epsilon),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TincError::invalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(TincError::invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TincError::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.dv_min_days >= self.dv_max_days {
            return Err(TincError::invalid(format!(
                "dv_min_days ({}) must be < dv_max_days ({})",
                self.dv_min_days, self.dv_max_days
            )));
        }
        Ok(())
    }
}

/// Unweighted loss parts plus the weighted total.
///
/// For VICReg-family losses `variance` and `covariance` are summed over both
/// views. For Barlow Twins `invariance` holds the on-diagonal part and `extra`
/// the off-diagonal part; `extra` is the time-head MSE for the time-head
/// method.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub extra: Option<f64>,
}

impl LossBreakdown {
    /// Weighted VICReg combination of the parts, with `extra` at unit weight.
    pub fn recombine_vicreg(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda_inv * self.invariance
            + cfg.mu_var * self.variance
            + cfg.nu_cov * self.covariance
            + self.extra.unwrap_or(0.0)
    }
}
