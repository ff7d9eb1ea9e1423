use serde::{Deserialize, Serialize};

use super::config::HEAD_DELTA_STD;
use super::loss::{forward_image, proposals};
use super::model::{pooled_region, roi_pool, DetectorModel};
use super::targets::MAX_LOG_SCALE;
use crate::error::Result;
use crate::geometry::{decode_deltas, nms, Deltas, LabeledBox};
use crate::nn::{Graph, Tensor};

/// Score threshold used when drawing detections.
pub const VISUALIZATION_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: LabeledBox,
    pub score: f64,
}

/// Detections of one image, sorted by descending confidence.
pub type DetectionResult = Vec<Detection>;

/// Runs the detector with per-class NMS. Boxes are clipped to the image and
/// every kept score is `>= score_thresh`.
pub fn detect(model: &DetectorModel, image: &Tensor, score_thresh: f64, nms_thresh: f64) -> Result<DetectionResult> {
    let c = &model.config;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let fwd = forward_image(&mut g, &bound, model, image)?;
    let props = proposals(&g, &fwd, model, false);
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<_> = props.iter().map(|p| p.bbox).collect();
    let pooled = roi_pool(&mut g, &fwd.fm, &boxes, (c.roi_bins, c.roi_bins));
    let out = bound.heads(&mut g, pooled);
    let scores = g.value(out.scores);
    let deltas = g.value(out.deltas);
    let (w, h) = (fwd.image_dims.0 as f64, fwd.image_dims.1 as f64);
    let k = c.num_classes + 1;
    let mut dets = Vec::new();
    for cls in 1..k {
        let mut cb = Vec::new();
        let mut cs = Vec::new();
        for (r, prop) in boxes.iter().enumerate() {
            let row = scores.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let p = (row[cls] - m).exp() / z;
            if !(p >= score_thresh) {
                continue;
            }
            let d = &deltas.row(r)[4 * cls..4 * cls + 4];
            let d = Deltas {
                dx: d[0] * HEAD_DELTA_STD[0],
                dy: d[1] * HEAD_DELTA_STD[1],
                dw: (d[2] * HEAD_DELTA_STD[2]).min(MAX_LOG_SCALE),
                dh: (d[3] * HEAD_DELTA_STD[3]).min(MAX_LOG_SCALE),
            };
            let reference = pooled_region(prop, fwd.fm.stride, fwd.fm.height, fwd.fm.width, fwd.image_dims);
            let Some(b) = decode_deltas(&reference, &d).clip(w, h) else { continue };
            cb.push(b);
            cs.push(p);
        }
        for i in nms(&cb, &cs, nms_thresh) {
            dets.push(Detection { bbox: LabeledBox { bbox: cb[i], class_id: cls }, score: cs[i] });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(c.max_detections);
    Ok(dets)
}
