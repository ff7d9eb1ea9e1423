//! Axis-aligned boxes, IOU, NMS, anchors and box-delta coding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in continuous pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    /// Builds a box, rejecting empty or inverted extents and non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite corner ({x1}, {y1}, {x2}, {y2})")));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidBox(format!("degenerate extent ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &Box) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Box> {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        Box::new(x1, y1, x2, y2).ok()
    }

    pub fn contains_box(&self, other: &Box) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

/// A box carrying a foreground class id in `[1, C]`; 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(flatten)]
    pub bbox: Box,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl LabeledBox {
    pub fn new(bbox: Box, class_id: usize, num_classes: usize) -> Result<Self> {
        if class_id == 0 || class_id > num_classes {
            return Err(Error::InvalidClass { class_id, num_classes });
        }
        Ok(Self { bbox, class_id })
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Boxes are visited by descending score with ties going to the lower index;
/// a box is dropped when its IOU with an already kept box exceeds `iou_thresh`.
/// The returned indices are in visiting order.
pub fn nms(boxes: &[Box], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = argsort_desc(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Indices sorted by descending value, stable on ties (lower index first).
pub fn argsort_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Window width and height for a (scale, ratio) pair: area `scale^2`, `h / w = ratio`.
pub fn window_extent(scale: f64, ratio: f64) -> (f64, f64) {
    (scale * (1.0 / ratio).sqrt(), scale * ratio.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: Box,
    pub row: usize,
    pub col: usize,
    pub scale: f64,
    pub ratio: f64,
}

/// Tiles `scales x ratios` anchors centred on every feature cell.
///
/// Ordering is row-major over locations, then scales, then ratios, so anchor
/// `((row * feat_w + col) * scales.len() + s) * ratios.len() + r`.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * scales.len() * ratios.len());
    for row in 0..feat_h {
        for col in 0..feat_w {
            let cx = (col as f64 + 0.5) * stride;
            let cy = (row as f64 + 0.5) * stride;
            for &scale in scales {
                for &ratio in ratios {
                    let (w, h) = window_extent(scale, ratio);
                    anchors.push(Anchor {
                        bbox: Box { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h },
                        row,
                        col,
                        scale,
                        ratio,
                    });
                }
            }
        }
    }
    anchors
}

/// Box regression target relative to a reference box; `dw`, `dh` are log scale factors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Deltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { dx: v[0], dy: v[1], dw: v[2], dh: v[3] }
    }
}

pub fn encode_deltas(target: &Box, reference: &Box) -> Deltas {
    let (cx, cy) = target.center();
    let (ax, ay) = reference.center();
    let (aw, ah) = (reference.width(), reference.height());
    Deltas {
        dx: (cx - ax) / aw,
        dy: (cy - ay) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    }
}

pub fn decode_deltas(reference: &Box, d: &Deltas) -> Box {
    let (ax, ay) = reference.center();
    let (aw, ah) = (reference.width(), reference.height());
    let cx = ax + d.dx * aw;
    let cy = ay + d.dy * ah;
    let w = aw * d.dw.exp();
    let h = ah * d.dh.exp();
    Box { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
}
