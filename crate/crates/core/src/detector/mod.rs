//! Minimal two-stage detector: stride-16 conv backbone, RPN, ROI max pooling
//! and class/box heads.

pub mod checkpoint;
mod config;
mod inference;
mod loss;
mod model;
mod targets;

pub use config::{DetectorConfig, HEAD_DELTA_STD, STRIDE};
pub use inference::{detect, Detection, DetectionResult, VISUALIZATION_THRESHOLD};
pub use loss::{
    detection_loss_terms, forward_image, prepare_targets, proposals, rpn_values, DetLoss, ImageForward, ImageTargets,
};
pub use model::{
    delta_index, objectness_index, pooled_region, project_box, roi_pool, BoundDetector, DetectorModel, FeatureMap, HeadOutput,
    ParamGroup, RpnOutput, DETECTOR_TAG,
};
pub use targets::{
    default_roi_sample, generate_proposals, rpn_targets, AnchorTargets, Proposal, RoiSample, RoiSampling,
    MAX_LOG_SCALE,
};
