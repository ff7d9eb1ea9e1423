use serde::{Deserialize, Serialize};

/// Architecture and sampling hyperparameters of the two-stage detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Foreground class count `C`; head scores have `C + 1` entries, background at 0.
    pub num_classes: usize,
    /// Output channels of the four stride-2 backbone stages.
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Side of the ROI pooling grid feeding the heads.
    pub roi_bins: usize,
    /// Width of the two hidden head layers (the instance feature width).
    pub head_width: usize,

    pub rpn_batch: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub roi_batch_cap: usize,
    pub roi_fg_iou: f64,
    pub roi_bg_lo: f64,

    pub rpn_nms: f64,
    pub train_pre_nms: usize,
    pub train_post_nms: usize,
    pub test_pre_nms: usize,
    pub test_post_nms: usize,
    pub max_detections: usize,
}

/// Four stride-2 stages.
pub const STRIDE: usize = 16;

/// Normalisation of head regression targets, as in Fast R-CNN.
pub const HEAD_DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone_channels: [32, 64, 128, 128],
            rpn_channels: 128,
            anchor_scales: vec![96.0, 160.0, 256.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_bins: 3,
            head_width: 256,
            rpn_batch: 128,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            roi_batch_cap: 64,
            roi_fg_iou: 0.5,
            roi_bg_lo: 0.1,
            rpn_nms: 0.7,
            train_pre_nms: 1000,
            train_post_nms: 128,
            test_pre_nms: 1000,
            test_post_nms: 100,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    /// Half-resolution variant sized for single-core CPU runs on 256x256 canvases.
    pub fn desk() -> Self {
        Self {
            backbone_channels: [16, 32, 64, 64],
            rpn_channels: 32,
            anchor_scales: vec![48.0, 80.0, 128.0],
            rpn_batch: 64,
            train_pre_nms: 400,
            train_post_nms: 48,
            test_pre_nms: 400,
            test_post_nms: 48,
            ..Self::default()
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[3]
    }

    /// Feature-map size for an input dimension: `ceil(dim / 16)`.
    pub fn feature_dim(image_dim: usize) -> usize {
        image_dim.div_ceil(STRIDE)
    }
}
