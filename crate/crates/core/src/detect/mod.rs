//! Anchor-based 2D-3D detection head: anchors, target assignment, residual
//! encoding, losses, NMS and lifting detections to 3D.

mod anchors;
mod codec;
mod head;
mod loss;
mod output;

pub use anchors::{
    anchor_scales, anchor_templates, assign_targets, compute_anchor_priors, generate_anchors, iou_2d, Anchor2D3D,
    AnchorGrid, AnchorTemplate, Assignment, BoxParams, TemplatePrior,
};
pub use codec::{decode, encode_targets, Decoded, RESIDUALS, RESIDUAL_NAMES, SIZE_CLAMP};
pub use head::{DetectionHead, HeadOutput, PRIOR_PROB};
pub use loss::{build_targets, detection_loss, AnchorTarget, DetLoss, GroundTruth, LossWeights};
pub use output::{
    backproject_center, decode_detections, ground_truth_from_label, nms, to_kitti_label, Decoding, Detection3D,
};

use thiserror::Error;

use crate::kittiio::KittiError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("anchors: {0}")]
    Anchors(String),
    #[error("targets: {0}")]
    Target(String),
    #[error("expected {what}, got shape {shape:?}")]
    Shape { what: &'static str, shape: Vec<usize> },
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DetectError>;
