use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::config::{DetectorConfig, STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{generate_anchors, Anchor, Box};
use crate::nn::{CellRange, Graph, ParamSet, Tensor, Var};

/// Tag under which detector parameters are bound into a [`Graph`].
pub const DETECTOR_TAG: u32 = 1;

/// Coarse grouping of detector parameters, used for gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Rpn,
    /// Hidden head layers between ROI pooling and the output layers.
    HeadHidden,
    HeadOutput,
}

// Slot layout (weight, bias pairs).
const BACKBONE: [usize; 4] = [0, 2, 4, 6];
const RPN_CONV: usize = 8;
const RPN_CLS: usize = 10;
const RPN_BOX: usize = 12;
const FC1: usize = 14;
const FC2: usize = 16;
const CLS: usize = 18;
const BBOX: usize = 20;
const NUM_SLOTS: usize = 22;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

/// Spatial feature map living in a graph, with its stride to the input image.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Per-image RPN outputs: objectness logits `[1, A, H, W]` and deltas `[1, 4A, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    pub objectness: Var,
    pub deltas: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// Penultimate activation, `[R, head_width]`.
    pub hidden: Var,
    /// `[R, C + 1]` class logits, background at 0.
    pub scores: Var,
    /// `[R, 4 (C + 1)]` class-specific deltas.
    pub deltas: Var,
}

/// Detector parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct BoundDetector {
    vars: Vec<Var>,
}

impl DetectorModel {
    pub fn new(config: DetectorConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let ch = config.backbone_channels;
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            p.push_conv(&format!("backbone.conv{}", i + 1), cin, c, 3, rng);
            cin = c;
        }
        let a = config.anchors_per_location();
        p.push_conv("rpn.conv", ch[3], config.rpn_channels, 3, rng);
        let cls = p.push_linear("rpn.cls", config.rpn_channels, a, 0.01, rng);
        let bx = p.push_linear("rpn.bbox", config.rpn_channels, 4 * a, 0.01, rng);
        // 1x1 convolutions stored in conv layout.
        for slot in [cls, bx] {
            let t = &mut p.tensors_mut()[slot];
            t.shape = vec![t.shape[0], t.shape[1], 1, 1];
        }
        let pooled = ch[3] * config.roi_bins * config.roi_bins;
        let w = config.head_width;
        p.push_linear("head.fc1", pooled, w, (2.0 / pooled as f64).sqrt(), rng);
        p.push_linear("head.fc2", w, w, (2.0 / w as f64).sqrt(), rng);
        p.push_linear("head.cls", w, config.num_classes + 1, 0.01, rng);
        p.push_linear("head.bbox", w, 4 * (config.num_classes + 1), 0.001, rng);
        debug_assert_eq!(p.len(), NUM_SLOTS);
        Self { config, params: p }
    }

    pub fn from_parts(config: DetectorConfig, params: ParamSet) -> Result<Self> {
        let reference = DetectorModel::new(config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        if params.len() != reference.params.len()
            || params.tensors().iter().zip(reference.params.tensors()).any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::Checkpoint("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn stride(&self) -> usize {
        STRIDE
    }

    pub fn group_of(slot: usize) -> ParamGroup {
        match slot {
            s if s < RPN_CONV => ParamGroup::Backbone,
            s if s < FC1 => ParamGroup::Rpn,
            s if s < CLS => ParamGroup::HeadHidden,
            _ => ParamGroup::HeadOutput,
        }
    }

    /// Binds parameters as trainable (`trainable = true`) or frozen constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDetector {
        BoundDetector { vars: g.bind(&self.params, trainable.then_some(DETECTOR_TAG)) }
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> Vec<Anchor> {
        generate_anchors(feat_h, feat_w, STRIDE as f64, &self.config.anchor_scales, &self.config.anchor_ratios)
    }

    /// Convenience: frozen forward of the backbone, returning the map values.
    pub fn backbone_values(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let fm = b.backbone(&mut g, image)?;
        Ok(g.value(fm.var).clone())
    }
}

impl BoundDetector {
    /// Four stride-2 3x3 conv + ReLU stages over a `[1, 3, H, W]` image.
    pub fn backbone(&self, g: &mut Graph, image: &Tensor) -> Result<FeatureMap> {
        if image.shape.len() != 4 || image.shape[0] != 1 || image.shape[1] != 3 {
            return Err(Error::Shape(format!("expected a [1, 3, H, W] image, got {:?}", image.shape)));
        }
        if image.shape[2] == 0 || image.shape[3] == 0 {
            return Err(Error::InvalidArgument("image has zero extent".into()));
        }
        let x = g.constant(image.clone());
        self.backbone_from(g, x)
    }

    pub fn backbone_from(&self, g: &mut Graph, x: Var) -> Result<FeatureMap> {
        let mut h = x;
        for &slot in &BACKBONE {
            h = g.conv2d(h, self.vars[slot], self.vars[slot + 1], 2, 1);
            h = g.relu(h);
        }
        let s = g.shape(h).to_vec();
        Ok(FeatureMap { var: h, channels: s[1], height: s[2], width: s[3], stride: STRIDE })
    }

    pub fn rpn(&self, g: &mut Graph, fm: &FeatureMap) -> RpnOutput {
        let h = g.conv2d(fm.var, self.vars[RPN_CONV], self.vars[RPN_CONV + 1], 1, 1);
        let h = g.relu(h);
        let objectness = g.conv2d(h, self.vars[RPN_CLS], self.vars[RPN_CLS + 1], 1, 0);
        let deltas = g.conv2d(h, self.vars[RPN_BOX], self.vars[RPN_BOX + 1], 1, 0);
        RpnOutput { objectness, deltas }
    }

    /// Hidden head layers only; the output is the instance feature `[R, head_width]`.
    pub fn head_hidden(&self, g: &mut Graph, pooled: Var) -> Var {
        let h = g.linear(pooled, self.vars[FC1], self.vars[FC1 + 1]);
        let h = g.relu(h);
        let h = g.linear(h, self.vars[FC2], self.vars[FC2 + 1]);
        g.relu(h)
    }

    pub fn heads(&self, g: &mut Graph, pooled: Var) -> HeadOutput {
        let hidden = self.head_hidden(g, pooled);
        let scores = g.linear(hidden, self.vars[CLS], self.vars[CLS + 1]);
        let deltas = g.linear(hidden, self.vars[BBOX], self.vars[BBOX + 1]);
        HeadOutput { hidden, scores, deltas }
    }
}

/// Projects a pixel box onto feature cells, rounding outward by at most one
/// cell; boxes thinner than a cell collapse to a single cell.
pub fn project_box(b: &Box, stride: usize, feat_h: usize, feat_w: usize) -> CellRange {
    let s = stride as f64;
    let axis = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let z = ((hi / s).ceil().max(0.0) as usize).min(n);
        (a, z.max(a + 1))
    };
    let (c0, c1) = axis(b.x1, b.x2, feat_w);
    let (r0, r1) = axis(b.y1, b.y2, feat_h);
    CellRange { r0, r1, c0, c1 }
}

/// Pixel box of the cells `b` is pooled from, clipped to the image. Head
/// regression is relative to this box, so ROIs that pool identical cells
/// share their regression reference.
pub fn pooled_region(b: &Box, stride: usize, feat_h: usize, feat_w: usize, image_dims: (usize, usize)) -> Box {
    let r = project_box(b, stride, feat_h, feat_w);
    let s = stride as f64;
    let (w, h) = (image_dims.0 as f64, image_dims.1 as f64);
    Box { x1: r.c0 as f64 * s, y1: r.r0 as f64 * s, x2: (r.c1 as f64 * s).min(w), y2: (r.r1 as f64 * s).min(h) }
}

/// ROI max pooling of pixel-space boxes on a feature map:
/// `[R, C, bins, bins]`.
pub fn roi_pool(g: &mut Graph, fm: &FeatureMap, boxes: &[Box], bins: (usize, usize)) -> Var {
    let ranges: Vec<CellRange> = boxes.iter().map(|b| project_box(b, fm.stride, fm.height, fm.width)).collect();
    g.roi_pool(fm.var, &ranges, bins.0, bins.1)
}

/// Flat index of anchor `i` in a `[1, A, H, W]` objectness map.
pub fn objectness_index(anchor: usize, a: usize, hw: usize) -> usize {
    let loc = anchor / a;
    (anchor % a) * hw + loc
}

/// Flat index of coordinate `k` of anchor `i` in a `[1, 4A, H, W]` delta map.
pub fn delta_index(anchor: usize, k: usize, a: usize, hw: usize) -> usize {
    let loc = anchor / a;
    (4 * (anchor % a) + k) * hw + loc
}
