//! Anchor labelling for the RPN, proposal generation and ROI sampling for the heads.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geometry::{argsort_desc, decode_deltas, encode_deltas, iou, nms, Anchor, Box, Deltas, LabeledBox};

/// Log-scale clamp applied to predicted deltas before decoding.
pub const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: Box,
    pub objectness: f64,
}

/// Decode, clip, drop boxes with a side under 2 px, NMS, keep the best `post_nms_top_k`.
///
/// Objectness ties keep anchor order.
#[allow(clippy::too_many_arguments)]
pub fn generate_proposals(
    anchors: &[Anchor],
    objectness: &[f64],
    deltas: &[Deltas],
    image_dims: (usize, usize),
    pre_nms_top_k: usize,
    nms_thresh: f64,
    post_nms_top_k: usize,
) -> Vec<Proposal> {
    assert_eq!(anchors.len(), objectness.len());
    assert_eq!(anchors.len(), deltas.len());
    let (w, h) = (image_dims.0 as f64, image_dims.1 as f64);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for i in argsort_desc(objectness).into_iter().take(pre_nms_top_k) {
        let mut d = deltas[i];
        d.dw = d.dw.min(MAX_LOG_SCALE);
        d.dh = d.dh.min(MAX_LOG_SCALE);
        let decoded = decode_deltas(&anchors[i].bbox, &d);
        let Some(clipped) = clip_loose(&decoded, w, h) else { continue };
        if clipped.width() < 2.0 || clipped.height() < 2.0 {
            continue;
        }
        boxes.push(clipped);
        scores.push(objectness[i]);
    }
    nms(&boxes, &scores, nms_thresh)
        .into_iter()
        .take(post_nms_top_k)
        .map(|k| Proposal { bbox: boxes[k], objectness: scores[k] })
        .collect()
}

fn clip_loose(b: &Box, w: f64, h: f64) -> Option<Box> {
    if !(b.x1.is_finite() && b.y1.is_finite() && b.x2.is_finite() && b.y2.is_finite()) {
        return None;
    }
    b.clip(w, h)
}

/// Sampled anchors with binary labels, plus regression targets for positives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorTargets {
    pub sampled: Vec<usize>,
    pub labels: Vec<f64>,
    pub positives: Vec<(usize, Deltas)>,
}

/// Positive: IOU >= `pos_iou` with a GT, or the best anchor of some GT.
/// Negative: best IOU < `neg_iou`. Samples up to `batch` anchors, at most half positive.
pub fn rpn_targets(
    anchors: &[Anchor],
    gts: &[Box],
    pos_iou: f64,
    neg_iou: f64,
    batch: usize,
    rng: &mut impl Rng,
) -> AnchorTargets {
    let mut best = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(&a.bbox, g);
            if v > best[i] {
                best[i] = v;
                best_gt[i] = j;
            }
            if v > gt_best[j] {
                gt_best[j] = v;
            }
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..anchors.len() {
        let forced = best_gt[i] != usize::MAX && gt_best[best_gt[i]] > 0.0 && best[i] == gt_best[best_gt[i]];
        if best[i] >= pos_iou || forced {
            pos.push(i);
        } else if best[i] < neg_iou {
            neg.push(i);
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(batch / 2);
    neg.truncate(batch - pos.len());
    let positives = pos.iter().map(|&i| (i, encode_deltas(&gts[best_gt[i]], &anchors[i].bbox))).collect();
    let mut sampled = pos.clone();
    sampled.extend(&neg);
    let mut labels = vec![1.0; pos.len()];
    labels.extend(std::iter::repeat(0.0).take(neg.len()));
    AnchorTargets { sampled, labels, positives }
}

/// IOU bands and batch cap for ROI sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSampling {
    pub batch_cap: usize,
    pub fg_iou: f64,
    pub bg_lo: f64,
    /// Exclusive upper IOU bound for background.
    pub bg_hi: f64,
}

impl RoiSampling {
    pub fn standard(batch_cap: usize, bg_lo: f64) -> Self {
        Self { batch_cap, fg_iou: 0.5, bg_lo, bg_hi: 0.5 }
    }
}

/// ROIs for the heads: class label (0 = background) and, for foreground,
/// the regression target toward the matched GT.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiSample {
    pub boxes: Vec<Box>,
    pub labels: Vec<usize>,
    pub targets: Vec<Option<Deltas>>,
    /// Index into the GT list of the matched box, foreground only.
    pub matched: Vec<Option<usize>>,
}

impl RoiSample {
    pub fn num_fg(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Faster R-CNN ROI sampling at a 1:3 foreground:background ratio.
///
/// GT boxes join the candidate pool. Foreground is IOU >= `fg_iou` with the
/// best-matching GT; background is `[bg_lo, bg_hi)`. With no GT at all every
/// candidate is background. Takes `min(avail_fg, cap / 4)` foreground and
/// `min(3 * fg, avail_bg)` background, or a background-only batch of up to
/// `3 * cap / 4` when no foreground exists.
pub fn default_roi_sample(
    proposals: &[Box],
    gts: &[LabeledBox],
    sampling: &RoiSampling,
    rng: &mut impl Rng,
) -> RoiSample {
    let candidates: Vec<Box> = proposals.iter().copied().chain(gts.iter().map(|g| g.bbox)).collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if gts.is_empty() {
            bg.push((i, 0usize));
            continue;
        }
        let (j, v) = gts
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou(c, &g.bbox)))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if v >= sampling.fg_iou {
            fg.push((i, j));
        } else if v >= sampling.bg_lo && v < sampling.bg_hi {
            bg.push((i, j));
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(sampling.batch_cap / 4);
    let n_bg = if fg.is_empty() { 3 * sampling.batch_cap / 4 } else { 3 * fg.len() };
    bg.truncate(n_bg);
    let mut out = RoiSample::default();
    for &(i, j) in &fg {
        out.boxes.push(candidates[i]);
        out.labels.push(gts[j].class_id);
        out.targets.push(Some(encode_deltas(&gts[j].bbox, &candidates[i])));
        out.matched.push(Some(j));
    }
    for &(i, _) in &bg {
        out.boxes.push(candidates[i]);
        out.labels.push(0);
        out.targets.push(None);
        out.matched.push(None);
    }
    out
}
