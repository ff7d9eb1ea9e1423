//! Source pretraining, the loose-annotation fine-tuning loss, and the
//! alternating adaptation loop.
//!
//! Step 1 updates the detector on
//! `alpha (L_im_g + L_ins_g) + beta (L_det + L_ft) + lambda L_reg` with every
//! discriminator bound as a constant. Step 2 updates the discriminators on
//! `L_im_d + L_ins_d` over the Step-1 features, detached.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    d_image_loss, d_instance_loss, g_image_loss, g_instance_loss, image_discriminator_loss, ImagePatchDiscriminator,
    InstanceDiscriminator, ScaleSharingPolicy, IMAGE_DISC_TAG, INSTANCE_DISC_TAG,
};
use crate::detector::{
    detection_loss_terms, forward_image, prepare_targets, proposals, BoundDetector, DetLoss, DetectorConfig,
    DetectorModel, ImageForward, ImageTargets, ParamGroup, RoiSampling, DETECTOR_TAG,
};
use crate::error::{Error, Result};
use crate::instance::{extract_instance_features, instance_roi_sample, InstanceFeatureSet, INSTANCE_IOU};
use crate::nn::{clip_grad_norm, Adam, Graph, ParamSet, Sgd, Tensor, Var};
use crate::pairing::{make_instance_pairs, make_pairs, make_singles, PairBatch, PairGroup};
use crate::smfr::{foreground_mask, global_smfr_loss, smfr_loss, FrozenSourceExtractor, FOREGROUND_IOU};
use crate::split_pooling::{split_pool, ScaleGroup, SplitPoolConfig};
use crate::synthdata::ImageSample;

/// Hidden width of each image discriminator.
pub const IMAGE_DISC_HIDDEN: usize = 32;
/// Hidden width of the instance discriminator.
pub const INSTANCE_DISC_HIDDEN: usize = 128;
/// Global gradient-norm cap applied to every update.
pub const MAX_GRAD_NORM: f64 = 10.0;
const MOMENTUM: f64 = 0.9;
/// Upper IOU bound for background ROIs when fine-tuning on loose labels.
pub const LOOSE_BG_IOU: f64 = 0.3;

/// Where target-domain instance ROIs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRois {
    Proposals,
    Annotations,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub sp_s: bool,
    pub sp_m: bool,
    pub sp_l: bool,
    pub ins: bool,
    pub ft: bool,
    pub pairing: bool,
    pub smfr: bool,
    /// Regularise the whole feature map instead of the foreground mask.
    pub smfr_global: bool,
    pub share_discriminators: bool,
    pub lr_detector: f64,
    pub lr_discriminator: f64,
    pub source_images: usize,
    pub target_images: usize,
    pub n_pairs_per_scale: usize,
    pub n_pairs_per_class: usize,
    pub target_rois: TargetRois,
    pub split_pool: SplitPoolConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            lambda: 1.0,
            steps: 500,
            sp_s: true,
            sp_m: true,
            sp_l: true,
            ins: true,
            ft: true,
            pairing: true,
            smfr: true,
            smfr_global: false,
            share_discriminators: true,
            lr_detector: 1e-3,
            lr_discriminator: 1e-3,
            source_images: 2,
            target_images: 8,
            n_pairs_per_scale: 32,
            n_pairs_per_class: 16,
            target_rois: TargetRois::Both,
            split_pool: SplitPoolConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// All adaptation components off; only `beta L_det` remains.
    pub fn all_off() -> Self {
        Self { sp_s: false, sp_m: false, sp_l: false, ins: false, ft: false, smfr: false, ..Self::default() }
    }

    pub fn enabled_scales(&self) -> Vec<ScaleGroup> {
        ScaleGroup::ALL
            .into_iter()
            .filter(|s| match s {
                ScaleGroup::Small => self.sp_s,
                ScaleGroup::Medium => self.sp_m,
                ScaleGroup::Large => self.sp_l,
            })
            .collect()
    }

    pub fn sharing(&self) -> ScaleSharingPolicy {
        ScaleSharingPolicy { shared: self.share_discriminators }
    }

    /// Rejects negative weights or rates; returns warnings for configurations
    /// that adapt nothing.
    pub fn validate(&self) -> Result<Vec<String>> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("lr_detector", self.lr_detector),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.source_images == 0 {
            return Err(Error::Config("source_images must be at least 1".into()));
        }
        let mut warnings = Vec::new();
        if !(self.sp_s || self.sp_m || self.sp_l || self.ins || self.ft) {
            warnings.push("no adaptation component enabled; only the source detection loss is optimised".into());
        }
        Ok(warnings)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub detector: DetectorConfig,
    pub steps: usize,
    pub lr: f64,
    pub images_per_step: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { detector: DetectorConfig::default(), steps: 2000, lr: 1e-3, images_per_step: 2, seed: 0 }
    }
}

/// Per-step loss values; terms that are disabled or skipped read 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_det: f64,
    pub l_im_d: f64,
    pub l_im_g: f64,
    pub l_ins_d: f64,
    pub l_ins_g: f64,
    pub l_reg: f64,
    pub l_ft: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub image_terms: usize,
    pub instance_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub traces: Vec<StepLosses>,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub skipped: SkipCounts,
}

impl AdaptationReport {
    /// `step,l_det,l_im_d,l_im_g,l_ins_d,l_ins_g,l_reg,l_ft` rows.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "l_det", "l_im_d", "l_im_g", "l_ins_d", "l_ins_g", "l_reg", "l_ft"])?;
        for t in &self.traces {
            out.write_record(&[
                t.step.to_string(),
                format!("{:e}", t.l_det),
                format!("{:e}", t.l_im_d),
                format!("{:e}", t.l_im_g),
                format!("{:e}", t.l_ins_d),
                format!("{:e}", t.l_ins_g),
                format!("{:e}", t.l_reg),
                format!("{:e}", t.l_ft),
            ])?;
        }
        out.flush().map_err(|e| Error::Io { path: "<trace>".into(), source: e })?;
        Ok(())
    }
}

fn check_finite(v: f64, step: usize, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { step, term: term.into() })
    }
}

/// Source-domain detection loss of one image with freshly sampled targets.
fn source_det_loss(
    g: &mut Graph,
    bound: &BoundDetector,
    model: &DetectorModel,
    fwd: &ImageForward,
    sample: &ImageSample,
    rng: &mut impl Rng,
) -> DetLoss {
    let c = &model.config;
    let sampling = RoiSampling::standard(c.roi_batch_cap, c.roi_bg_lo);
    let targets = prepare_targets(g, fwd, model, &sample.annotations, &sampling, rng);
    detection_loss_terms(g, bound, model, fwd, &targets)
}

/// ROI sampling used by the fine-tuning term: background only below
/// `LOOSE_BG_IOU` to every annotated box.
pub fn loose_sampling(config: &DetectorConfig) -> RoiSampling {
    RoiSampling { batch_cap: config.roi_batch_cap, fg_iou: config.roi_fg_iou, bg_lo: config.roi_bg_lo, bg_hi: LOOSE_BG_IOU }
}

/// Training targets of a loosely annotated target image: annotated boxes are
/// the only foreground.
pub fn finetune_targets(
    g: &Graph,
    fwd: &ImageForward,
    model: &DetectorModel,
    sample: &ImageSample,
    rng: &mut impl Rng,
) -> Result<ImageTargets> {
    if sample.annotations.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning image carries no annotation".into()));
    }
    Ok(prepare_targets(g, fwd, model, &sample.annotations, &loose_sampling(&model.config), rng))
}

/// Detection loss on a loosely annotated target image.
pub fn finetune_loss(
    g: &mut Graph,
    bound: &BoundDetector,
    model: &DetectorModel,
    fwd: &ImageForward,
    sample: &ImageSample,
    rng: &mut impl Rng,
) -> Result<DetLoss> {
    let targets = finetune_targets(g, fwd, model, sample, rng)?;
    Ok(detection_loss_terms(g, bound, model, fwd, &targets))
}

/// Trains a fresh detector on fully annotated source images with Adam.
pub fn pretrain(source: &[ImageSample], cfg: &PretrainConfig) -> Result<DetectorModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DetectorModel::new(cfg.detector.clone(), &mut rng);
    pretrain_from(&mut model, source, cfg, &mut rng, |_, _| {})?;
    Ok(model)
}

/// Continues training `model`; `on_step(step, loss)` observes progress.
pub fn pretrain_from(
    model: &mut DetectorModel,
    source: &[ImageSample],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    if cfg.steps > 0 && source.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs at least one source image".into()));
    }
    let mut opt = Adam::new(&model.params, cfg.lr);
    let per_step = cfg.images_per_step.max(1).min(source.len().max(1));
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let mut terms = Vec::new();
        for i in sample(rng, source.len(), per_step).into_iter() {
            let s = &source[i];
            let fwd = forward_image(&mut g, &bound, model, &s.to_tensor())?;
            let l = source_det_loss(&mut g, &bound, model, &fwd, s, rng);
            terms.push((l.total, 1.0 / per_step as f64));
        }
        let total = g.weighted_sum(&terms);
        let v = check_finite(g.value(total).item(), step, "l_det")?;
        let grads = g.backward(total);
        let mut pg = g.param_grads(&grads, DETECTOR_TAG, model.params.len());
        clip_grad_norm(&mut pg, MAX_GRAD_NORM);
        opt.step(&mut model.params, &pg);
        on_step(step, v);
    }
    Ok(())
}

/// Which parameter groups each loss term reaches, per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingEntry {
    pub group: String,
    pub step1: Vec<String>,
    pub step2: Vec<String>,
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Backbone => "detector.backbone",
        ParamGroup::Rpn => "detector.rpn",
        ParamGroup::HeadHidden => "detector.head_hidden",
        ParamGroup::HeadOutput => "detector.head_output",
    }
}

/// Static routing table for `cfg`: every enabled term and the parameter
/// groups its gradient reaches.
pub fn loss_step_audit(cfg: &AdaptConfig) -> Vec<RoutingEntry> {
    use ParamGroup::*;
    let mut terms: Vec<(&str, Vec<ParamGroup>)> = Vec::new();
    if cfg.beta > 0.0 {
        terms.push(("l_det", vec![Backbone, Rpn, HeadHidden, HeadOutput]));
        if cfg.ft {
            terms.push(("l_ft", vec![Backbone, Rpn, HeadHidden, HeadOutput]));
        }
    }
    if cfg.alpha > 0.0 && !cfg.enabled_scales().is_empty() {
        terms.push(("l_im_g", vec![Backbone]));
    }
    if cfg.alpha > 0.0 && cfg.ins {
        terms.push(("l_ins_g", vec![Backbone, HeadHidden]));
    }
    if cfg.lambda > 0.0 && cfg.smfr {
        terms.push(("l_reg", vec![Backbone]));
    }
    let mut table: Vec<RoutingEntry> = [Backbone, Rpn, HeadHidden, HeadOutput]
        .into_iter()
        .map(|grp| RoutingEntry {
            group: group_name(grp).into(),
            step1: terms.iter().filter(|(_, gs)| gs.contains(&grp)).map(|(t, _)| t.to_string()).collect(),
            step2: Vec::new(),
        })
        .collect();
    if !cfg.enabled_scales().is_empty() {
        for k in 0..cfg.sharing().num_discriminators() {
            let serves: Vec<_> = cfg.enabled_scales().into_iter().filter(|&s| cfg.sharing().route(s) == k).collect();
            if !serves.is_empty() {
                table.push(RoutingEntry {
                    group: format!("image_discriminator.{k}"),
                    step1: Vec::new(),
                    step2: vec!["l_im_d".into()],
                });
            }
        }
    }
    if cfg.ins {
        table.push(RoutingEntry { group: "instance_discriminator".into(), step1: Vec::new(), step2: vec!["l_ins_d".into()] });
    }
    table
}

/// Pair batches detached from Step 1, consumed by Step 2.
#[derive(Debug, Clone, Default)]
pub struct DetachedPairs {
    /// `(discriminator index, G1 items, G2 items)`.
    pub image: Vec<(usize, Tensor, Tensor)>,
    pub instance: BTreeMap<usize, (Tensor, Tensor)>,
}

/// Mutable adaptation state: detector, discriminators and their optimisers.
pub struct Adapter<'a> {
    pub model: DetectorModel,
    pub image_discs: Vec<Option<ImagePatchDiscriminator>>,
    pub instance_disc: Option<InstanceDiscriminator>,
    cfg: AdaptConfig,
    frozen: &'a FrozenSourceExtractor,
    source: &'a [ImageSample],
    target: &'a [ImageSample],
    det_opt: Sgd,
    image_opts: Vec<Option<Sgd>>,
    instance_opt: Option<Sgd>,
    pub skipped: SkipCounts,
}

// Independent random streams per step, so switching one component off
// leaves the draws of every other component unchanged.
const STREAM_BATCH: u64 = 0;
const STREAM_DET: u64 = 1;
const STREAM_FT: u64 = 2;
const STREAM_SPLIT: u64 = 3; // + scale index
const STREAM_PAIR: u64 = 6; // + scale index
const STREAM_INSTANCE: u64 = 9;

fn mix(seed: u64, step: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct ImageBatch {
    fwd: ImageForward,
    patches: Vec<(ScaleGroup, Var)>,
}

impl<'a> Adapter<'a> {
    pub fn new(
        source_model: &DetectorModel,
        frozen: &'a FrozenSourceExtractor,
        source: &'a [ImageSample],
        target: &'a [ImageSample],
        cfg: &AdaptConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            return Err(Error::InvalidArgument("adaptation needs source images".into()));
        }
        let needs_target = cfg.ins || cfg.ft || !cfg.enabled_scales().is_empty();
        if needs_target && target.is_empty() {
            return Err(Error::InvalidArgument("adaptation components enabled but the target set is empty".into()));
        }
        if cfg.ft && target.iter().any(|t| t.annotations.is_empty()) {
            return Err(Error::InvalidArgument("fine-tuning needs at least one annotation per target image".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let width = if cfg.pairing { 2 } else { 1 };
        let policy = cfg.sharing();
        let scales = cfg.enabled_scales();
        let image_discs: Vec<Option<ImagePatchDiscriminator>> = (0..policy.num_discriminators())
            .map(|k| {
                scales.iter().any(|&s| policy.route(s) == k).then(|| {
                    ImagePatchDiscriminator::new(
                        width * source_model.config.feature_channels(),
                        IMAGE_DISC_HIDDEN,
                        &mut rng,
                    )
                })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - 1);
        let instance_disc = cfg.ins.then(|| {
            InstanceDiscriminator::new(
                width * source_model.config.head_width,
                INSTANCE_DISC_HIDDEN,
                source_model.config.num_classes,
                &mut rng,
            )
        });
        let sgd = |p: &ParamSet, lr| Sgd::new(p, lr, MOMENTUM, 0.0);
        Ok(Self {
            model: source_model.clone(),
            image_opts: image_discs.iter().map(|d| d.as_ref().map(|d| sgd(&d.params, cfg.lr_discriminator))).collect(),
            instance_opt: instance_disc.as_ref().map(|d| sgd(&d.params, cfg.lr_discriminator)),
            det_opt: sgd(&source_model.params, cfg.lr_detector),
            image_discs,
            instance_disc,
            cfg: cfg.clone(),
            frozen,
            source,
            target,
            skipped: SkipCounts::default(),
        })
    }

    fn stream(&self, step: usize, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, step));
        rng.set_stream(k);
        rng
    }

    fn forward_batch(
        &mut self,
        g: &mut Graph,
        bound: &BoundDetector,
        images: &[&ImageSample],
        source_domain: bool,
        rngs: &mut [ChaCha8Rng; 3],
    ) -> Result<Vec<ImageBatch>> {
        let scales = self.cfg.enabled_scales();
        let mut out = Vec::with_capacity(images.len());
        for s in images {
            let fwd = forward_image(g, bound, &self.model, &s.to_tensor())?;
            let mut patches = Vec::new();
            for &grp in &scales {
                let rng = &mut rngs[grp.index()];
                let set = split_pool(g, &fwd.fm, (s.width, s.height), grp, &self.cfg.split_pool, source_domain, rng)?;
                if let Some(f) = set.features {
                    patches.push((grp, f));
                }
            }
            out.push(ImageBatch { fwd, patches });
        }
        Ok(out)
    }

    fn instance_features(
        &mut self,
        g: &mut Graph,
        bound: &BoundDetector,
        batch: &[ImageBatch],
        images: &[&ImageSample],
        source_domain: bool,
    ) -> Result<InstanceFeatureSet> {
        let c = self.model.config.num_classes;
        let mut merged: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (b, s) in batch.iter().zip(images) {
            let use_props = source_domain || self.cfg.target_rois != TargetRois::Annotations;
            let props: Vec<_> = if use_props {
                proposals(g, &b.fwd, &self.model, true).into_iter().map(|p| p.bbox).collect()
            } else {
                Vec::new()
            };
            let mut rois = instance_roi_sample(&props, &s.annotations, INSTANCE_IOU, c)?;
            if !source_domain && self.cfg.target_rois == TargetRois::Proposals {
                // Drop the appended annotation boxes, keep proposal hits only.
                for (cls, v) in rois.iter_mut() {
                    let n_gt = s.annotations.iter().filter(|a| a.class_id == *cls).count();
                    v.truncate(v.len() - n_gt);
                }
            }
            let set = extract_instance_features(g, &self.model, bound, &b.fwd.fm, &rois, source_domain);
            for (cls, v) in set.by_class {
                merged.entry(cls).or_default().push(v);
                *counts.entry(cls).or_default() += set.counts[&cls];
            }
        }
        let mut set = InstanceFeatureSet { width: self.model.config.head_width, source_domain, ..Default::default() };
        for (cls, parts) in merged {
            let v = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
            set.by_class.insert(cls, v);
        }
        set.counts = counts;
        Ok(set)
    }

    fn pick(rng: &mut ChaCha8Rng, n_pool: usize, n: usize) -> Vec<usize> {
        if n >= n_pool {
            (0..n_pool).collect()
        } else {
            let mut v = sample(rng, n_pool, n).into_vec();
            v.sort_unstable();
            v
        }
    }

    /// Step 1: detector update. Discriminators enter as constants.
    pub fn step1(&mut self, step: usize) -> Result<(StepLosses, DetachedPairs)> {
        let cfg = self.cfg.clone();
        let mut losses = StepLosses { step, ..Default::default() };
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let mut batch_rng = self.stream(step, STREAM_BATCH);
        let mut det_rng = self.stream(step, STREAM_DET);
        let mut ft_rng = self.stream(step, STREAM_FT);
        let mut split_rngs = [0, 1, 2].map(|k| self.stream(step, STREAM_SPLIT + k));
        let mut pair_rngs = [0, 1, 2].map(|k| self.stream(step, STREAM_PAIR + k));
        let mut instance_rng = self.stream(step, STREAM_INSTANCE);
        let src_idx = Self::pick(&mut batch_rng, self.source.len(), cfg.source_images);
        let source: Vec<&ImageSample> = src_idx.iter().map(|&i| &self.source[i]).collect();
        let uses_target = cfg.ins || cfg.ft || !cfg.enabled_scales().is_empty();
        let tgt_idx = if uses_target { Self::pick(&mut batch_rng, self.target.len(), cfg.target_images.max(1)) } else { Vec::new() };
        let target: Vec<&ImageSample> = tgt_idx.iter().map(|&i| &self.target[i]).collect();

        let src = self.forward_batch(&mut g, &bound, &source, true, &mut split_rngs)?;
        let tgt = self.forward_batch(&mut g, &bound, &target, false, &mut split_rngs)?;
        let mut terms: Vec<(Var, f64)> = Vec::new();

        if cfg.beta > 0.0 {
            let mut parts = Vec::new();
            for (b, s) in src.iter().zip(&source) {
                let l = source_det_loss(&mut g, &bound, &self.model, &b.fwd, s, &mut det_rng);
                parts.push((l.total, 1.0 / source.len() as f64));
            }
            let l_det = g.weighted_sum(&parts);
            losses.l_det = check_finite(g.value(l_det).item(), step, "l_det")?;
            terms.push((l_det, cfg.beta));
            if cfg.ft {
                let mut parts = Vec::new();
                for (b, s) in tgt.iter().zip(&target) {
                    let l = finetune_loss(&mut g, &bound, &self.model, &b.fwd, s, &mut ft_rng)?;
                    parts.push((l.total, 1.0 / target.len() as f64));
                }
                let l_ft = g.weighted_sum(&parts);
                losses.l_ft = check_finite(g.value(l_ft).item(), step, "l_ft")?;
                terms.push((l_ft, cfg.beta));
            }
        }

        if cfg.smfr && cfg.lambda > 0.0 {
            let mut parts = Vec::new();
            for (b, s) in src.iter().zip(&source) {
                let f_s = self.frozen.features(&s.to_tensor())?;
                let l = if cfg.smfr_global {
                    global_smfr_loss(&mut g, &f_s, b.fwd.fm.var)?
                } else {
                    let mask = foreground_mask(&b.fwd.anchors, &s.gt_boxes(), FOREGROUND_IOU, b.fwd.fm.height, b.fwd.fm.width);
                    smfr_loss(&mut g, &f_s, b.fwd.fm.var, &mask)?
                };
                parts.push((l, 1.0 / source.len() as f64));
            }
            let l_reg = g.weighted_sum(&parts);
            losses.l_reg = check_finite(g.value(l_reg).item(), step, "l_reg")?;
            terms.push((l_reg, cfg.lambda));
        }

        let mut detached = DetachedPairs::default();
        let policy = cfg.sharing();
        let image_bound: Vec<_> =
            self.image_discs.iter().map(|d| d.as_ref().map(|d| d.bind(&mut g, None))).collect();
        let mut im_terms = Vec::new();
        for grp in cfg.enabled_scales() {
            let collect = |batch: &[ImageBatch]| -> Vec<Var> {
                batch.iter().flat_map(|b| b.patches.iter().filter(|p| p.0 == grp).map(|p| p.1)).collect()
            };
            let (s_parts, t_parts) = (collect(&src), collect(&tgt));
            if s_parts.is_empty() || t_parts.is_empty() {
                self.skipped.image_terms += 1;
                continue;
            }
            let s_all = g.concat_rows(&s_parts);
            let t_all = g.concat_rows(&t_parts);
            let made = if cfg.pairing {
                make_pairs(&mut g, s_all, t_all, cfg.n_pairs_per_scale, &mut pair_rngs[grp.index()])
            } else {
                make_singles(&mut g, s_all, t_all, cfg.n_pairs_per_scale, &mut pair_rngs[grp.index()])
            };
            let Some((mut g1, mut g2)) = made else {
                self.skipped.image_terms += 1;
                continue;
            };
            g1.scale_group = Some(grp);
            g2.scale_group = Some(grp);
            let k = policy.route(grp);
            let d = image_bound[k].as_ref().expect("discriminator allocated for enabled scale");
            if let Some(l) = g_image_loss(&mut g, d, &g1, &g2) {
                im_terms.push(l);
            }
            detached.image.push((k, g.value(g1.items).clone(), g.value(g2.items).clone()));
        }
        if !im_terms.is_empty() {
            let l_im_g = image_discriminator_loss(&mut g, &im_terms);
            losses.l_im_g = check_finite(g.value(l_im_g).item(), step, "l_im_g")?;
            terms.push((l_im_g, cfg.alpha));
        }

        if cfg.ins {
            let o_s = self.instance_features(&mut g, &bound, &src, &source, true)?;
            let o_t = self.instance_features(&mut g, &bound, &tgt, &target, false)?;
            let pairs = make_instance_pairs(&mut g, &o_s, &o_t, cfg.n_pairs_per_class, cfg.pairing, &mut instance_rng);
            let d = self.instance_disc.as_ref().expect("instance discriminator allocated").bind(&mut g, None);
            match g_instance_loss(&mut g, &d, &pairs) {
                Some(l) => {
                    losses.l_ins_g = check_finite(g.value(l).item(), step, "l_ins_g")?;
                    terms.push((l, cfg.alpha));
                    for (cls, (n1, n2)) in &pairs {
                        detached.instance.insert(*cls, (g.value(n1.items).clone(), g.value(n2.items).clone()));
                    }
                }
                None => self.skipped.instance_terms += 1,
            }
        }

        let terms: Vec<(Var, f64)> = terms.into_iter().filter(|&(_, w)| w != 0.0).collect();
        if !terms.is_empty() {
            let total = g.weighted_sum(&terms);
            let grads = g.backward(total);
            let mut pg = g.param_grads(&grads, DETECTOR_TAG, self.model.params.len());
            clip_grad_norm(&mut pg, MAX_GRAD_NORM);
            self.det_opt.step(&mut self.model.params, &pg);
        }
        Ok((losses, detached))
    }

    /// Step 2: discriminator update on detached features. Returns
    /// `(l_im_d, l_ins_d)`.
    pub fn step2(&mut self, step: usize, pairs: &DetachedPairs) -> Result<(f64, f64)> {
        let mut l_im_d = 0.0;
        let mut l_ins_d = 0.0;
        if !pairs.image.is_empty() {
            let mut g = Graph::new();
            let bound: Vec<_> = self
                .image_discs
                .iter()
                .enumerate()
                .map(|(k, d)| d.as_ref().map(|d| d.bind(&mut g, Some(IMAGE_DISC_TAG + k as u32))))
                .collect();
            let mut parts = Vec::new();
            for (k, a, b) in &pairs.image {
                let g1 = constant_batch(&mut g, PairGroup::SourceSource, a);
                let g2 = constant_batch(&mut g, PairGroup::SourceTarget, b);
                let d = bound[*k].as_ref().expect("routed discriminator exists");
                if let Some(l) = d_image_loss(&mut g, d, &g1, &g2) {
                    parts.push(l);
                }
            }
            let total = image_discriminator_loss(&mut g, &parts);
            l_im_d = check_finite(g.value(total).item(), step, "l_im_d")?;
            let grads = g.backward(total);
            for (k, disc) in self.image_discs.iter_mut().enumerate() {
                if let (Some(d), Some(opt)) = (disc.as_mut(), self.image_opts[k].as_mut()) {
                    let mut pg = g.param_grads(&grads, IMAGE_DISC_TAG + k as u32, d.params.len());
                    clip_grad_norm(&mut pg, MAX_GRAD_NORM);
                    opt.step(&mut d.params, &pg);
                }
            }
        }
        if !pairs.instance.is_empty() {
            if let (Some(d), Some(opt)) = (self.instance_disc.as_mut(), self.instance_opt.as_mut()) {
                let mut g = Graph::new();
                let bound = d.bind(&mut g, Some(INSTANCE_DISC_TAG));
                let mut batches = BTreeMap::new();
                for (&cls, (a, b)) in &pairs.instance {
                    let mut n1 = constant_batch(&mut g, PairGroup::SourceSource, a);
                    let mut n2 = constant_batch(&mut g, PairGroup::SourceTarget, b);
                    n1.class_id = Some(cls);
                    n2.class_id = Some(cls);
                    batches.insert(cls, (n1, n2));
                }
                if let Some(l) = d_instance_loss(&mut g, &bound, &batches) {
                    l_ins_d = check_finite(g.value(l).item(), step, "l_ins_d")?;
                    let grads = g.backward(l);
                    let mut pg = g.param_grads(&grads, INSTANCE_DISC_TAG, d.params.len());
                    clip_grad_norm(&mut pg, MAX_GRAD_NORM);
                    opt.step(&mut d.params, &pg);
                }
            }
        }
        Ok((l_im_d, l_ins_d))
    }

    pub fn step(&mut self, step: usize) -> Result<StepLosses> {
        let (mut losses, detached) = self.step1(step)?;
        let (im_d, ins_d) = self.step2(step, &detached)?;
        losses.l_im_d = im_d;
        losses.l_ins_d = ins_d;
        Ok(losses)
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }
}

fn constant_batch(g: &mut Graph, group: PairGroup, t: &Tensor) -> PairBatch {
    let len = t.shape[0];
    let items = g.constant(t.clone());
    PairBatch { group, class_id: None, scale_group: None, items, len, paired: true }
}

/// Runs `cfg.steps` alternating updates from the source model.
pub fn adapt(
    source_model: &DetectorModel,
    frozen: &FrozenSourceExtractor,
    source: &[ImageSample],
    fewshot_target: &[ImageSample],
    cfg: &AdaptConfig,
) -> Result<(DetectorModel, AdaptationReport)> {
    let start = Instant::now();
    let mut adapter = Adapter::new(source_model, frozen, source, fewshot_target, cfg)?;
    let mut traces = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        traces.push(adapter.step(step)?);
    }
    let report = AdaptationReport {
        traces,
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        skipped: adapter.skipped.clone(),
    };
    Ok((adapter.model, report))
}
