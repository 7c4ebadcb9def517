//! Feature partitioning and every loss used in training: masked feature
//! imitation, response distillation, supervised detection loss and their
//! weighted total.

mod losses;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::scalar::Scalar;

pub use losses::{
    detection_loss, feature_loss, gaussian_focal, quality_focal, response_loss, CenterTarget, DetLoss, DetTargets,
    ResponseLoss,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistillError {
    #[error("partition sizes sum to {expected} but the feature has {found} channels")]
    PartitionMismatch { expected: usize, found: usize },
    #[error("channel ratio {0:?} cannot split {1} channels")]
    BadRatio((usize, usize, usize), usize),
    #[error("loss component `{name}` is not finite ({value})")]
    NonFinite { name: &'static str, value: f64 },
}

/// Contiguous channel groups of the student feature, in the order
/// image, lidar, label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub image: usize,
    pub lidar: usize,
    pub label: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self { image: 16, lidar: 16, label: 16 }
    }
}

impl PartitionSpec {
    pub fn total(&self) -> usize {
        self.image + self.lidar + self.label
    }

    /// Splits `channels` by integer ratio; the ratio sum must divide it.
    pub fn from_ratio(ratio: (usize, usize, usize), channels: usize) -> Result<Self, DistillError> {
        let parts = ratio.0 + ratio.1 + ratio.2;
        if parts == 0 || channels % parts != 0 {
            return Err(DistillError::BadRatio(ratio, channels));
        }
        let unit = channels / parts;
        Ok(Self { image: ratio.0 * unit, lidar: ratio.1 * unit, label: ratio.2 * unit })
    }

    pub fn image_range(&self) -> Range<usize> {
        0..self.image
    }

    pub fn lidar_range(&self) -> Range<usize> {
        self.image..self.image + self.lidar
    }

    pub fn label_range(&self) -> Range<usize> {
        self.image + self.lidar..self.total()
    }

    pub fn check(&self, channels: usize) -> Result<(), DistillError> {
        if self.total() != channels {
            return Err(DistillError::PartitionMismatch { expected: self.total(), found: channels });
        }
        Ok(())
    }
}

/// The three channel groups of `features`.
pub fn partition<S: Scalar>(
    features: &Tensor<S>,
    spec: &PartitionSpec,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), DistillError> {
    spec.check(features.c)?;
    Ok((
        features.slice_channels(spec.image_range()),
        features.slice_channels(spec.lidar_range()),
        features.slice_channels(spec.label_range()),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// LiDAR feature imitation.
    pub lambda_lidar: f64,
    /// Label feature imitation.
    pub lambda_label: f64,
    /// Response distillation.
    pub lambda_response: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Exponent of the quality focal loss used for soft heatmap targets.
    pub quality_gamma: f64,
    /// Weight of the L1 box regression inside the detection loss.
    pub regress: f64,
    /// Weight of the depth cross-entropy inside the detection loss.
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lidar: 1.0,
            lambda_label: 1.0,
            lambda_response: 0.25,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            quality_gamma: 2.0,
            regress: 1.0,
            depth: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.lambda_lidar,
            self.lambda_label,
            self.lambda_response,
            self.focal_alpha,
            self.focal_beta,
            self.quality_gamma,
            self.regress,
            self.depth,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err("loss weights must be finite and non-negative".into())
        }
    }
}

/// Component values of one training step. Disabled terms are `None` and
/// contribute nothing to the total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub detection: f64,
    pub lidar_feature: Option<f64>,
    pub label_feature: Option<f64>,
    pub response: Option<f64>,
}

/// `L_det + l1 L_lidar + l2 L_label + l3 L_resp`, refusing non-finite
/// components.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64, DistillError> {
    let check = |name: &'static str, value: f64| {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(DistillError::NonFinite { name, value })
        }
    };
    let mut total = check("detection", terms.detection)?;
    if let Some(v) = terms.lidar_feature {
        total += weights.lambda_lidar * check("lidar_feature", v)?;
    }
    if let Some(v) = terms.label_feature {
        total += weights.lambda_label * check("label_feature", v)?;
    }
    if let Some(v) = terms.response {
        total += weights.lambda_response * check("response", v)?;
    }
    Ok(total)
}
