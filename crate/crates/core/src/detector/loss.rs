//! Faster R-CNN training loss for one image, split into a non-differentiable
//! target preparation pass and a differentiable loss pass so the latter can be
//! re-evaluated with frozen targets.

use rand::Rng;

use super::config::HEAD_DELTA_STD;
use super::model::{delta_index, objectness_index, pooled_region, roi_pool, BoundDetector, DetectorModel, FeatureMap, RpnOutput};
use super::targets::{default_roi_sample, generate_proposals, rpn_targets, AnchorTargets, Proposal, RoiSample, RoiSampling};
use crate::error::Result;
use crate::geometry::{encode_deltas, Anchor, Deltas, LabeledBox};
use crate::nn::{Graph, Tensor, Var};

/// Smooth-L1 transition point for RPN regression (sigma = 3).
const RPN_BETA: f64 = 1.0 / 9.0;

/// Forward results of one image through backbone and RPN.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub fm: FeatureMap,
    pub rpn: RpnOutput,
    pub anchors: Vec<Anchor>,
    pub image_dims: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageTargets {
    pub rpn: AnchorTargets,
    pub rois: RoiSample,
}

/// The four Faster R-CNN terms; `total` is their sum.
#[derive(Debug, Clone, Copy)]
pub struct DetLoss {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
    pub total: Var,
}

pub fn forward_image(g: &mut Graph, bound: &BoundDetector, model: &DetectorModel, image: &Tensor) -> Result<ImageForward> {
    let fm = bound.backbone(g, image)?;
    let rpn = bound.rpn(g, &fm);
    let anchors = model.anchors(fm.height, fm.width);
    Ok(ImageForward { fm, rpn, anchors, image_dims: (image.shape[3], image.shape[2]) })
}

/// Per-anchor objectness logits and deltas read back from the graph.
pub fn rpn_values(g: &Graph, fwd: &ImageForward) -> (Vec<f64>, Vec<Deltas>) {
    let a = fwd.anchors.len() / (fwd.fm.height * fwd.fm.width);
    let hw = fwd.fm.height * fwd.fm.width;
    let obj = &g.value(fwd.rpn.objectness).data;
    let del = &g.value(fwd.rpn.deltas).data;
    let scores = (0..fwd.anchors.len()).map(|i| obj[objectness_index(i, a, hw)]).collect();
    let deltas = (0..fwd.anchors.len())
        .map(|i| Deltas {
            dx: del[delta_index(i, 0, a, hw)],
            dy: del[delta_index(i, 1, a, hw)],
            dw: del[delta_index(i, 2, a, hw)],
            dh: del[delta_index(i, 3, a, hw)],
        })
        .collect();
    (scores, deltas)
}

pub fn proposals(g: &Graph, fwd: &ImageForward, model: &DetectorModel, training: bool) -> Vec<Proposal> {
    let (scores, deltas) = rpn_values(g, fwd);
    let c = &model.config;
    let (pre, post) = if training { (c.train_pre_nms, c.train_post_nms) } else { (c.test_pre_nms, c.test_post_nms) };
    generate_proposals(&fwd.anchors, &scores, &deltas, fwd.image_dims, pre, c.rpn_nms, post)
}

pub fn prepare_targets(
    g: &Graph,
    fwd: &ImageForward,
    model: &DetectorModel,
    gts: &[LabeledBox],
    sampling: &RoiSampling,
    rng: &mut impl Rng,
) -> ImageTargets {
    let c = &model.config;
    let gt_boxes: Vec<_> = gts.iter().map(|g| g.bbox).collect();
    let rpn = rpn_targets(&fwd.anchors, &gt_boxes, c.rpn_pos_iou, c.rpn_neg_iou, c.rpn_batch, rng);
    let props: Vec<_> = proposals(g, fwd, model, true).into_iter().map(|p| p.bbox).collect();
    let mut rois = default_roi_sample(&props, gts, sampling, rng);
    for i in 0..rois.boxes.len() {
        if let Some(j) = rois.matched[i] {
            let reference = pooled_region(&rois.boxes[i], fwd.fm.stride, fwd.fm.height, fwd.fm.width, fwd.image_dims);
            rois.targets[i] = Some(encode_deltas(&gts[j].bbox, &reference));
        }
    }
    ImageTargets { rpn, rois }
}

/// Differentiable loss for fixed targets.
///
/// Classification terms are means over the sampled anchors / ROIs; the
/// regression terms are summed over positive coordinates and normalised by
/// the same counts. Images without positives contribute classification only.
pub fn detection_loss_terms(
    g: &mut Graph,
    bound: &BoundDetector,
    model: &DetectorModel,
    fwd: &ImageForward,
    targets: &ImageTargets,
) -> DetLoss {
    let c = &model.config;
    let hw = fwd.fm.height * fwd.fm.width;
    let a = c.anchors_per_location();

    let n_anchor = targets.rpn.sampled.len().max(1) as f64;
    let idx: Vec<usize> = targets.rpn.sampled.iter().map(|&i| objectness_index(i, a, hw)).collect();
    let w = vec![1.0 / n_anchor; idx.len()];
    let rpn_cls = g.sigmoid_bce(fwd.rpn.objectness, &idx, &targets.rpn.labels, &w);

    let mut ridx = Vec::new();
    let mut rtgt = Vec::new();
    for (i, d) in &targets.rpn.positives {
        for (k, v) in d.to_array().into_iter().enumerate() {
            ridx.push(delta_index(*i, k, a, hw));
            rtgt.push(v);
        }
    }
    let rw = vec![1.0 / n_anchor; ridx.len()];
    let rpn_reg = g.smooth_l1(fwd.rpn.deltas, &ridx, &rtgt, &rw, RPN_BETA);

    let rois = &targets.rois;
    let (head_cls, head_reg) = if rois.boxes.is_empty() {
        let z = g.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let bins = (c.roi_bins, c.roi_bins);
        let pooled = roi_pool(g, &fwd.fm, &rois.boxes, bins);
        let out = bound.heads(g, pooled);
        let n = rois.boxes.len() as f64;
        let rows: Vec<usize> = (0..rois.boxes.len()).collect();
        let cls = g.softmax_ce(out.scores, &rows, &rois.labels, &vec![1.0 / n; rows.len()]);
        let k = 4 * (c.num_classes + 1);
        let mut hidx = Vec::new();
        let mut htgt = Vec::new();
        for (r, (label, t)) in rois.labels.iter().zip(&rois.targets).enumerate() {
            if let Some(t) = t {
                for (j, v) in t.to_array().into_iter().enumerate() {
                    hidx.push(r * k + 4 * label + j);
                    htgt.push(v / HEAD_DELTA_STD[j]);
                }
            }
        }
        let hw = vec![1.0 / n; hidx.len()];
        let reg = g.smooth_l1(out.deltas, &hidx, &htgt, &hw, 1.0);
        (cls, reg)
    };
    let total = g.weighted_sum(&[(rpn_cls, 1.0), (rpn_reg, 1.0), (head_cls, 1.0), (head_reg, 1.0)]);
    DetLoss { rpn_cls, rpn_reg, head_cls, head_reg, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::geometry::Box;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::normal_tensor(&[1, 3, 64, 64], 0.5, &mut rng)
    }

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            backbone_channels: [4, 6, 8, 8],
            rpn_channels: 6,
            head_width: 16,
            anchor_scales: vec![16.0, 32.0],
            anchor_ratios: vec![1.0],
            ..DetectorConfig::desk()
        }
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = DetectorModel::new(small_config(), &mut rng);
        let image = toy_image(1);
        let gts = [
            LabeledBox { bbox: Box::new(8.0, 8.0, 30.0, 28.0).unwrap(), class_id: 1 },
            LabeledBox { bbox: Box::new(34.0, 30.0, 60.0, 62.0).unwrap(), class_id: 3 },
        ];
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let fwd = forward_image(&mut g, &bound, &model, &image).unwrap();
        let targets = prepare_targets(&g, &fwd, &model, &gts, &RoiSampling::standard(64, 0.1), &mut rng);
        assert!(targets.rois.num_fg() > 0);
        let loss = detection_loss_terms(&mut g, &bound, &model, &fwd, &targets);
        let value = g.value(loss.total).item();
        assert!(value.is_finite() && value >= 0.0);
        let grads = g.backward(loss.total);
        let pg = g.param_grads(&grads, super::super::model::DETECTOR_TAG, model.params.len());
        let cfg = model.config.clone();
        let report = gradcheck::check(&mut model.params, &pg, 30, &mut rng, |p| {
            let m = DetectorModel { config: cfg.clone(), params: p.clone() };
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let fwd = forward_image(&mut g, &b, &m, &image).unwrap();
            let l = detection_loss_terms(&mut g, &b, &m, &fwd, &targets);
            g.value(l.total).item()
        });
        assert_eq!(report.probes.len(), 30);
        assert!(report.kinks_skipped <= 3, "{} kink probes", report.kinks_skipped);
        assert!(report.passed(1e-3), "max rel err {}: {:?}", report.max_rel_err(), report.probes);
    }

    #[test]
    fn zero_gt_image_has_no_regression_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = DetectorModel::new(small_config(), &mut rng);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let fwd = forward_image(&mut g, &bound, &model, &toy_image(2)).unwrap();
        let targets = prepare_targets(&g, &fwd, &model, &[], &RoiSampling::standard(64, 0.1), &mut rng);
        assert!(targets.rpn.positives.is_empty());
        assert_eq!(targets.rois.num_fg(), 0);
        let loss = detection_loss_terms(&mut g, &bound, &model, &fwd, &targets);
        assert_eq!(g.value(loss.rpn_reg).item(), 0.0);
        assert_eq!(g.value(loss.head_reg).item(), 0.0);
        assert!(g.value(loss.total).item() > 0.0);
    }
}
