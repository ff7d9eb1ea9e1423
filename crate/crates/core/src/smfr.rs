//! Source-model feature regularisation: a foreground mask from anchors and
//! a masked squared distance to a frozen copy of the source backbone.

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::geometry::{iou, Anchor, Box};
use crate::nn::{Graph, Tensor, Var};

pub const FOREGROUND_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    /// Row-major `height x width` flags.
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

/// Location `(r, c)` is foreground iff one of its anchors overlaps some GT
/// box with IOU above `iou_thresh`.
pub fn foreground_mask(anchors: &[Anchor], gt_boxes: &[Box], iou_thresh: f64, feat_h: usize, feat_w: usize) -> ForegroundMask {
    let mut mask = vec![false; feat_h * feat_w];
    if !gt_boxes.is_empty() {
        for a in anchors {
            let cell = &mut mask[a.row * feat_w + a.col];
            if !*cell && gt_boxes.iter().any(|g| iou(&a.bbox, g) > iou_thresh) {
                *cell = true;
            }
        }
    }
    let k = mask.iter().filter(|&&m| m).count();
    ForegroundMask { mask, height: feat_h, width: feat_w, k }
}

fn check_shapes(g: &Graph, f_s: &Tensor, f_t: Var) -> Result<()> {
    if g.shape(f_t) != f_s.shape.as_slice() {
        return Err(Error::Shape(format!("source features {:?} vs adapted {:?}", f_s.shape, g.shape(f_t))));
    }
    Ok(())
}

/// `(1/k) * sum over masked locations and channels of (f_s - f_t)^2`, zero
/// when `k = 0`. Only `f_t` carries gradient.
pub fn smfr_loss(g: &mut Graph, f_s: &Tensor, f_t: Var, mask: &ForegroundMask) -> Result<Var> {
    check_shapes(g, f_s, f_t)?;
    let s = g.shape(f_t);
    if s.len() != 4 || s[2] != mask.height || s[3] != mask.width {
        return Err(Error::Shape(format!("mask {}x{} does not match features {:?}", mask.height, mask.width, s)));
    }
    Ok(g.masked_sq_diff(f_t, &f_s.data, &mask.mask, mask.k as f64))
}

/// Unmasked variant normalised by `w * h`.
pub fn global_smfr_loss(g: &mut Graph, f_s: &Tensor, f_t: Var) -> Result<Var> {
    check_shapes(g, f_s, f_t)?;
    let s = g.shape(f_t);
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [1, C, H, W] features, got {s:?}")));
    }
    let hw = s[2] * s[3];
    Ok(g.masked_sq_diff(f_t, &f_s.data, &vec![true; hw], hw as f64))
}

/// Immutable snapshot of the source detector, used only for its backbone.
#[derive(Debug, Clone)]
pub struct FrozenSourceExtractor {
    model: DetectorModel,
    checksum: u64,
}

impl FrozenSourceExtractor {
    pub fn new(model: &DetectorModel) -> Self {
        Self { model: model.clone(), checksum: model.params.checksum() }
    }

    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        self.model.backbone_values(image)
    }

    /// Checksum of the parameters as frozen at construction.
    pub fn frozen_checksum(&self) -> u64 {
        self.checksum
    }

    /// Checksum of the parameters now; equal to [`Self::frozen_checksum`].
    pub fn checksum(&self) -> u64 {
        self.model.params.checksum()
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::geometry::generate_anchors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchors(h: usize, w: usize) -> Vec<Anchor> {
        generate_anchors(h, w, 16.0, &[96.0, 160.0, 256.0], &[0.5, 1.0, 2.0])
    }

    #[test]
    fn mask_examples() {
        let a = anchors(8, 8);
        assert_eq!(foreground_mask(&a, &[], 0.5, 8, 8).k, 0);
        let target = a.iter().find(|x| x.row == 3 && x.col == 3).unwrap().bbox;
        let m = foreground_mask(&a, &[target], 0.5, 8, 8);
        assert!(m.mask[3 * 8 + 3]);
        assert_eq!(m.k, m.mask.iter().filter(|&&v| v).count());
    }

    #[test]
    fn mask_matches_per_anchor_scan() {
        let (h, w) = (32, 32);
        let a = anchors(h, w);
        for gt in [
            Box::new(100.0, 100.0, 164.0, 164.0).unwrap(),
            Box::new(0.0, 300.0, 64.0, 364.0).unwrap(),
            Box::new(200.0, 40.0, 420.0, 150.0).unwrap(),
        ] {
            let m = foreground_mask(&a, &[gt], 0.5, h, w);
            for r in 0..h {
                for c in 0..w {
                    let cx = (c as f64 + 0.5) * 16.0;
                    let cy = (r as f64 + 0.5) * 16.0;
                    let hit = [96.0, 160.0, 256.0].iter().any(|&s| {
                        [0.5f64, 1.0, 2.0].iter().any(|&ratio| {
                            let (aw, ah) = (s * (1.0 / ratio).sqrt(), s * ratio.sqrt());
                            let b = Box::from_center(cx, cy, aw, ah).unwrap();
                            iou(&b, &gt) > 0.5
                        })
                    });
                    assert_eq!(m.mask[r * w + c], hit, "({r}, {c})");
                }
            }
        }
    }

    fn feature_var(g: &mut Graph, data: Vec<f64>, c: usize, h: usize, w: usize) -> Var {
        g.variable(Tensor::new(vec![1, c, h, w], data))
    }

    #[test]
    fn loss_fixtures() {
        let mut g = Graph::new();
        let f_s = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let same = feature_var(&mut g, f_s.data.clone(), 1, 2, 2);
        let mask = ForegroundMask { mask: vec![true, true, true, false], height: 2, width: 2, k: 3 };
        let l0 = smfr_loss(&mut g, &f_s, same, &mask).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);

        let shifted = feature_var(&mut g, vec![3.0, 4.0, 5.0, 100.0], 1, 2, 2);
        let l4 = smfr_loss(&mut g, &f_s, shifted, &mask).unwrap();
        assert!((g.value(l4).item() - 4.0).abs() < 1e-12);

        let empty = ForegroundMask { mask: vec![false; 4], height: 2, width: 2, k: 0 };
        let lz = smfr_loss(&mut g, &f_s, shifted, &empty).unwrap();
        assert_eq!(g.value(lz).item(), 0.0);

        let plus1 = feature_var(&mut g, vec![2.0, 3.0, 4.0, 5.0], 1, 2, 2);
        let lg = global_smfr_loss(&mut g, &f_s, plus1).unwrap();
        assert!((g.value(lg).item() - 1.0).abs() < 1e-12);
        let full = ForegroundMask { mask: vec![true; 4], height: 2, width: 2, k: 4 };
        let lm = smfr_loss(&mut g, &f_s, plus1, &full).unwrap();
        assert_eq!(g.value(lm).item(), g.value(lg).item());

        let wrong = feature_var(&mut g, vec![0.0; 8], 2, 2, 2);
        assert!(smfr_loss(&mut g, &f_s, wrong, &mask).is_err());
        assert!(global_smfr_loss(&mut g, &f_s, wrong).is_err());
    }

    #[test]
    fn gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_s = crate::nn::normal_tensor(&[1, 2, 3, 3], 1.0, &mut rng);
        let f_t = crate::nn::normal_tensor(&[1, 2, 3, 3], 1.0, &mut rng);
        let mask = ForegroundMask {
            mask: vec![true, false, false, true, true, false, false, false, true],
            height: 3,
            width: 3,
            k: 4,
        };
        let mut g = Graph::new();
        let v = g.variable(f_t.clone());
        let loss = smfr_loss(&mut g, &f_s, v, &mask).unwrap();
        let grad = g.backward(loss).get(v).unwrap().clone();
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = smfr_loss(&mut g, &f_s, v, &mask).unwrap();
            g.value(l).item()
        };
        for i in 0..18 {
            let expect = if mask.mask[i % 9] { 2.0 * (f_t.data[i] - f_s.data[i]) / 4.0 } else { 0.0 };
            assert!((grad.data[i] - expect).abs() < 1e-12);
            if !mask.mask[i % 9] {
                assert_eq!(grad.data[i], 0.0);
            }
            let mut up = f_t.clone();
            up.data[i] += 1e-4;
            let mut down = f_t.clone();
            down.data[i] -= 1e-4;
            let numeric = (eval(&up) - eval(&down)) / 2e-4;
            assert!((numeric - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_extractor_is_stable() {
        let mut model = DetectorModel::new(DetectorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(1));
        let frozen = FrozenSourceExtractor::new(&model);
        let image = crate::nn::normal_tensor(&[1, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let a = frozen.features(&image).unwrap();
        model.params.tensors_mut()[0].data[0] += 1.0;
        assert_eq!(frozen.features(&image).unwrap(), a);
        assert_eq!(frozen.checksum(), frozen.frozen_checksum());
    }
}
