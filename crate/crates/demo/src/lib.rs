//! Browser demo: renders a synthetic source/target pair and overlays the
//! split-pooling grid or the foreground mask used by the feature regularizer.
//!
//! Every export returns plain data (RGBA bytes or JSON) so the page can draw
//! it on a canvas without further bindings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use fada::detector::{DetectorConfig, STRIDE};
use fada::geometry::generate_anchors;
use fada::smfr::{foreground_mask, FOREGROUND_IOU};
use fada::split_pooling::{enumerate_cells, sample_offsets, window_dims, GridSpec, ScaleGroup, SplitPoolConfig};
use fada::synthdata::{render_scene, sample_scene, Domain, DomainSpec, ImageSample, SceneSpec, SynthConfig};

fn scene(seed: u64) -> SceneSpec {
    sample_scene(&SynthConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rgba(sample: &ImageSample) -> Vec<u8> {
    sample.pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// The scene for `seed` drawn in the source domain (left) and in a target
/// domain with the given shift (right), as one `512 x 256` RGBA buffer.
#[wasm_bindgen]
pub fn render_pair(seed: u64, hue_shift: f64, blur_sigma: f64, noise_std: f64) -> Result<Vec<u8>, JsError> {
    let sc = scene(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let target = DomainSpec { hue_shift, blur_sigma, noise_std, background_seed: 0 };
    let a = render_scene(&sc, &DomainSpec::identity(), Domain::Source, &mut rng)?;
    let b = render_scene(&sc, &target, Domain::Target, &mut rng)?;
    let (w, h) = (a.width, a.height);
    let (la, lb) = (rgba(&a), rgba(&b));
    let mut out = Vec::with_capacity(8 * w * h);
    for y in 0..h {
        out.extend_from_slice(&la[4 * w * y..4 * w * (y + 1)]);
        out.extend_from_slice(&lb[4 * w * y..4 * w * (y + 1)]);
    }
    Ok(out)
}

/// Annotations of the scene for `seed`: `[{x1, y1, x2, y2, class_id}]`.
#[wasm_bindgen]
pub fn annotations(seed: u64) -> String {
    let sc = scene(seed);
    let sample = render_scene(&sc, &DomainSpec::identity(), Domain::Source, &mut ChaCha8Rng::seed_from_u64(0))
        .expect("identity domain is valid");
    let boxes: Vec<_> = sample
        .annotations
        .iter()
        .map(|a| json!({"x1": a.bbox.x1, "y1": a.bbox.y1, "x2": a.bbox.x2, "y2": a.bbox.y2, "class_id": a.class_id}))
        .collect();
    serde_json::Value::Array(boxes).to_string()
}

/// One random-offset grid per ratio of a scale group (0 small, 1 medium,
/// 2 large) on a 256 x 256 canvas: `[{ratio, window, offset, cells}]`.
#[wasm_bindgen]
pub fn split_grid(group: u8, grid_seed: u64) -> Result<String, JsError> {
    let group = *ScaleGroup::ALL.get(group as usize).ok_or_else(|| JsError::new("scale group must be 0, 1 or 2"))?;
    let cfg = SplitPoolConfig::desk();
    let canvas = SynthConfig::desk().canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(grid_seed);
    let mut grids = Vec::new();
    for &ratio in &cfg.ratios {
        let (w, h) = window_dims(cfg.scale(group), ratio)?;
        let (sx, sy) = sample_offsets(&mut rng, w, h)?;
        let grid = GridSpec { scale_group: group, window_w: w, window_h: h, offset_sx: sx, offset_sy: sy };
        let cells: Vec<[f64; 4]> = enumerate_cells(canvas, canvas, &grid).iter().map(|c| [c.x1, c.y1, c.x2, c.y2]).collect();
        grids.push(json!({"ratio": ratio, "window": [w, h], "offset": [sx, sy], "cells": cells}));
    }
    Ok(serde_json::Value::Array(grids).to_string())
}

/// Foreground feature locations of the scene for `seed` under the desk
/// detector's anchors: `{stride, height, width, k, mask}`.
#[wasm_bindgen]
pub fn foreground(seed: u64) -> String {
    let det = DetectorConfig::desk();
    let canvas = SynthConfig::desk().canvas;
    let fh = DetectorConfig::feature_dim(canvas);
    let anchors = generate_anchors(fh, fh, STRIDE as f64, &det.anchor_scales, &det.anchor_ratios);
    let sc = scene(seed);
    let gts: Vec<_> = sc.objects.iter().filter_map(|o| o.extent().clip(canvas as f64, canvas as f64)).collect();
    let m = foreground_mask(&anchors, &gts, FOREGROUND_IOU, fh, fh);
    json!({"stride": STRIDE, "height": m.height, "width": m.width, "k": m.k, "mask": m.mask}).to_string()
}
