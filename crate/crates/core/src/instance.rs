//! Instance ROIs at the strict IOU threshold and their per-class object
//! features from the hidden head layers.

use std::collections::BTreeMap;

use crate::detector::{roi_pool, BoundDetector, DetectorModel, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{iou, Box, LabeledBox};
use crate::nn::{Graph, Var};

pub const INSTANCE_IOU: f64 = 0.7;

/// Object features grouped by foreground class; each entry is `[n, width]`.
#[derive(Debug, Clone, Default)]
pub struct InstanceFeatureSet {
    pub by_class: BTreeMap<usize, Var>,
    pub counts: BTreeMap<usize, usize>,
    pub width: usize,
    pub source_domain: bool,
}

impl InstanceFeatureSet {
    pub fn count(&self, class_id: usize) -> usize {
        self.counts.get(&class_id).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

/// Keeps every proposal whose best IOU against a GT box reaches `iou_thresh`,
/// labelled with that GT's class, then appends the GT boxes themselves.
/// Every class in `1..=num_classes` has an entry, possibly empty.
pub fn instance_roi_sample(
    proposals: &[Box],
    gts: &[LabeledBox],
    iou_thresh: f64,
    num_classes: usize,
) -> Result<BTreeMap<usize, Vec<Box>>> {
    if !(iou_thresh > 0.5 && iou_thresh <= 1.0) {
        return Err(Error::InvalidArgument(format!("instance IOU threshold {iou_thresh} outside (0.5, 1]")));
    }
    let mut out: BTreeMap<usize, Vec<Box>> = (1..=num_classes).map(|c| (c, Vec::new())).collect();
    for p in proposals {
        let best = gts.iter().map(|g| (iou(p, &g.bbox), g.class_id)).fold(None, |acc: Option<(f64, usize)>, x| {
            match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            }
        });
        if let Some((v, cls)) = best {
            if v >= iou_thresh {
                out.entry(cls).or_default().push(*p);
            }
        }
    }
    for g in gts {
        out.entry(g.class_id).or_default().push(g.bbox);
    }
    Ok(out)
}

/// Pools every ROI and runs the hidden head layers, giving one
/// `head_width` vector per ROI, grouped by class. Empty classes are omitted.
pub fn extract_instance_features(
    g: &mut Graph,
    model: &DetectorModel,
    bound: &BoundDetector,
    fm: &FeatureMap,
    rois_by_class: &BTreeMap<usize, Vec<Box>>,
    source_domain: bool,
) -> InstanceFeatureSet {
    let width = model.config.head_width;
    let mut set = InstanceFeatureSet { width, source_domain, ..Default::default() };
    let mut boxes = Vec::new();
    let mut spans = Vec::new();
    for (&cls, rois) in rois_by_class {
        if !rois.is_empty() {
            spans.push((cls, boxes.len(), rois.len()));
            boxes.extend_from_slice(rois);
        }
    }
    if boxes.is_empty() {
        return set;
    }
    let bins = model.config.roi_bins;
    let pooled = roi_pool(g, fm, &boxes, (bins, bins));
    let hidden = bound.head_hidden(g, pooled);
    for (cls, start, n) in spans {
        let rows: Vec<usize> = (start..start + n).collect();
        let v = g.select_rows(hidden, &rows);
        set.by_class.insert(cls, v);
        set.counts.insert(cls, n);
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lb(x1: f64, y1: f64, x2: f64, y2: f64, c: usize) -> LabeledBox {
        LabeledBox { bbox: Box::new(x1, y1, x2, y2).unwrap(), class_id: c }
    }

    #[test]
    fn threshold_examples() {
        let gt = [lb(0.0, 0.0, 10.0, 14.0, 2)];
        let p = Box::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let kept = instance_roi_sample(&[p, gt[0].bbox], &gt, INSTANCE_IOU, 3).unwrap();
        assert_eq!(kept[&2], vec![p, gt[0].bbox, gt[0].bbox]);
        assert!(kept[&1].is_empty() && kept[&3].is_empty());
        // IOU 0.6 only.
        let q = Box::new(0.0, 0.0, 10.0, 6.0).unwrap();
        let r = instance_roi_sample(&[q], &[lb(0.0, 0.0, 10.0, 10.0, 1)], INSTANCE_IOU, 3).unwrap();
        assert_eq!(r[&1].len(), 1);
        assert!(instance_roi_sample(&[q], &[], 0.5, 3).is_err());
        assert!(instance_roi_sample(&[q], &[], 1.01, 3).is_err());
    }

    fn random_box(rng: &mut impl Rng) -> Box {
        let x = rng.gen_range(0.0..80.0);
        let y = rng.gen_range(0.0..80.0);
        Box::new(x, y, x + rng.gen_range(4.0..40.0), y + rng.gen_range(4.0..40.0)).unwrap()
    }

    #[test]
    fn matches_brute_force_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let gts: Vec<_> = (0..rng.gen_range(0..4))
                .map(|_| LabeledBox { bbox: random_box(&mut rng), class_id: rng.gen_range(1..=3) })
                .collect();
            // Jittered copies of GT boxes make near-threshold cases common.
            let mut props: Vec<_> = (0..20).map(|_| random_box(&mut rng)).collect();
            for g in &gts {
                let d = rng.gen_range(0.0..4.0);
                props.push(Box::new(g.bbox.x1 + d, g.bbox.y1, g.bbox.x2 + d, g.bbox.y2).unwrap());
            }
            let got = instance_roi_sample(&props, &gts, INSTANCE_IOU, 3).unwrap();
            let mut expect: BTreeMap<usize, Vec<Box>> = (1..=3).map(|c| (c, Vec::new())).collect();
            for p in &props {
                let mut best = (-1.0, 0);
                for g in &gts {
                    let v = iou(p, &g.bbox);
                    if v > best.0 {
                        best = (v, g.class_id);
                    }
                }
                if best.0 >= INSTANCE_IOU {
                    expect.get_mut(&best.1).unwrap().push(*p);
                }
            }
            for g in &gts {
                expect.get_mut(&g.class_id).unwrap().push(g.bbox);
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn features_are_grouped_and_deterministic() {
        let cfg = DetectorConfig { backbone_channels: [4, 4, 8, 8], head_width: 12, ..DetectorConfig::desk() };
        let model = DetectorModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let image = crate::nn::normal_tensor(&[1, 3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Box::new(8.0, 8.0, 40.0, 40.0).unwrap();
        let rois: BTreeMap<usize, Vec<Box>> = [(1, vec![]), (2, vec![b, b, b])].into_iter().collect();
        let run = || {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let fm = bound.backbone(&mut g, &image).unwrap();
            let set = extract_instance_features(&mut g, &model, &bound, &fm, &rois, true);
            let v: Tensor = g.value(set.by_class[&2]).clone();
            (set.counts.clone(), set.by_class.contains_key(&1), v)
        };
        let (counts, has1, v) = run();
        assert_eq!(counts[&2], 3);
        assert!(!has1);
        assert_eq!(v.shape, vec![3, 12]);
        assert_eq!(v.row(0), v.row(2));
        assert_eq!(run().2, v);
    }

    #[test]
    fn empty_rois_give_empty_set() {
        let model = DetectorModel::new(DetectorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fm = bound.backbone(&mut g, &Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        let set = extract_instance_features(&mut g, &model, &bound, &fm, &BTreeMap::new(), false);
        assert!(set.is_empty());
        assert_eq!(set.width, 256);
    }
}
