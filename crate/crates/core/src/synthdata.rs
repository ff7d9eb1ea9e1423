//! Synthetic two-domain detection data: coloured shapes on a textured
//! background, a photometric domain transform, the on-disk dataset format,
//! and the loose-annotation simulator.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box, LabeledBox};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Square, Shape::Triangle];

    pub fn class_id(self) -> usize {
        match self {
            Shape::Disk => 1,
            Shape::Square => 2,
            Shape::Triangle => 3,
        }
    }

    pub fn from_class(class_id: usize) -> Option<Shape> {
        Shape::ALL.get(class_id.wrapping_sub(1)).copied()
    }

    /// Base hue in degrees; colour correlates with class so a hue shift
    /// moves objects away from what the source detector has seen.
    fn base_hue(self) -> f64 {
        match self {
            Shape::Disk => 0.0,
            Shape::Square => 120.0,
            Shape::Triangle => 240.0,
        }
    }
}

/// Photometric domain: hue rotation, then Gaussian blur, then clipped noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Degrees.
    pub hue_shift: f64,
    /// Pixels.
    pub blur_sigma: f64,
    /// Intensity units on the `[0, 1]` scale.
    pub noise_std: f64,
    pub background_seed: u64,
}

impl DomainSpec {
    pub fn identity() -> Self {
        Self { hue_shift: 0.0, blur_sigma: 0.0, noise_std: 0.0, background_seed: 0 }
    }

    pub fn default_target() -> Self {
        Self { hue_shift: 60.0, blur_sigma: 2.0, noise_std: 0.05, background_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.noise_std >= 0.0 && self.hue_shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid domain {self:?}")));
        }
        Ok(())
    }
}

/// Canvas size and object statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Relative frequency of each class.
    pub class_balance: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { canvas: 512, min_objects: 1, max_objects: 8, min_size: 24.0, max_size: 160.0, class_balance: vec![1.0; 3] }
    }
}

impl SynthConfig {
    /// 256x256 canvases with proportionally fewer and smaller objects.
    pub fn desk() -> Self {
        Self { canvas: 256, max_objects: 4, min_size: 28.0, max_size: 88.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.canvas >= 16
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.max_size <= self.canvas as f64
            && !self.class_balance.is_empty()
            && self.class_balance.iter().all(|&w| w >= 0.0)
            && self.class_balance.iter().sum::<f64>() > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid synthetic data config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub center: (f64, f64),
    /// Diameter for disks, side for squares, base and height for triangles.
    pub size: f64,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn extent(&self) -> Box {
        let h = 0.5 * self.size;
        Box { x1: self.center.0 - h, y1: self.center.1 - h, x2: self.center.0 + h, y2: self.center.1 + h }
    }

    /// Whether the point lies inside the shape.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center;
        let h = 0.5 * self.size;
        match self.shape {
            Shape::Disk => (x - cx).powi(2) + (y - cy).powi(2) <= h * h,
            Shape::Square => (x - cx).abs() <= h && (y - cy).abs() <= h,
            Shape::Triangle => {
                // Apex at the top centre, base along the bottom edge.
                let t = (y - (cy - h)) / self.size;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= h * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub texture_seed: u64,
}

/// One RGB image (row-major, 8 bits per channel) with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub domain: Domain,
    pub annotations: Vec<LabeledBox>,
    /// True when `annotations` may omit some objects.
    pub loose: bool,
}

impl ImageSample {
    /// `[1, 3, H, W]` network input, centred to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], data)
    }

    pub fn gt_boxes(&self) -> Vec<Box> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }
}

pub type Dataset = Vec<ImageSample>;

/// Draws a scene: object count, classes by `class_balance`, sizes, and
/// positions fully inside the canvas with limited mutual overlap.
pub fn sample_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> SceneSpec {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let total: f64 = cfg.class_balance.iter().sum();
    let canvas = cfg.canvas as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.gen::<f64>() * total;
        let mut class_id = cfg.class_balance.len();
        for (i, &w) in cfg.class_balance.iter().enumerate() {
            if u < w {
                class_id = i + 1;
                break;
            }
            u -= w;
        }
        let shape = Shape::from_class(class_id).unwrap_or(Shape::Disk);
        let hue = shape.base_hue() + rng.gen_range(-20.0..20.0);
        let color = hsv_to_rgb(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.65..0.95));
        let mut obj = SceneObject { shape, center: (0.0, 0.0), size: 0.0, color };
        for _ in 0..30 {
            obj.size = rng.gen_range(cfg.min_size..=cfg.max_size).round();
            let h = 0.5 * obj.size;
            obj.center = (rng.gen_range(h..=canvas - h).round(), rng.gen_range(h..=canvas - h).round());
            if objects.iter().all(|o| iou(&o.extent(), &obj.extent()) < 0.2) {
                break;
            }
        }
        objects.push(obj);
    }
    SceneSpec { width: cfg.canvas, height: cfg.canvas, objects, texture_seed: rng.gen() }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hsv(p: [f64; 3]) -> (f64, f64, f64) {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == p[0] {
        60.0 * ((p[1] - p[2]) / d).rem_euclid(6.0)
    } else if max == p[1] {
        60.0 * ((p[2] - p[0]) / d + 2.0)
    } else {
        60.0 * ((p[0] - p[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Rotates the hue of every pixel (row-major RGB in `[0, 1]`).
pub fn rotate_hue(img: &mut [f64], degrees: f64) {
    if degrees == 0.0 {
        return;
    }
    for px in img.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
        px.copy_from_slice(&hsv_to_rgb(h + degrees, s, v));
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &mut [f64], width: usize, height: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = vec![0.0; img.len()];
    let idx = |x: usize, y: usize, c: usize| (y * width + x) * 3 + c;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let xx = (x as i64 + j as i64 - r).clamp(0, width as i64 - 1) as usize;
                    acc += w * img[idx(xx, y, c)];
                }
                tmp[idx(x, y, c)] = acc;
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, w) in k.iter().enumerate() {
                    let yy = (y as i64 + j as i64 - r).clamp(0, height as i64 - 1) as usize;
                    acc += w * tmp[idx(x, yy, c)];
                }
                img[idx(x, y, c)] = acc;
            }
        }
    }
}

fn background(width: usize, height: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.gen_range(0.35..0.6);
    let tint: [f64; 3] = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fx = rng.gen_range(-1.0..1.0) * std::f64::consts::TAU / 64.0;
            let fy = rng.gen_range(-1.0..1.0) * std::f64::consts::TAU / 64.0;
            (fx, fy, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.02..0.06))
        })
        .collect();
    let mut img = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let t: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for c in 0..3 {
                img[(y * width + x) * 3 + c] = (base + t + tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Rasterises the scene without any domain transform, `[0, 1]` RGB.
pub fn rasterize(scene: &SceneSpec, background_seed: u64) -> Vec<f64> {
    let (w, h) = (scene.width, scene.height);
    let mut img = background(w, h, background_seed ^ scene.texture_seed);
    const SS: usize = 4;
    for obj in &scene.objects {
        let b = obj.extent();
        let x0 = b.x1.floor().max(0.0) as usize;
        let y0 = b.y1.floor().max(0.0) as usize;
        let x1 = (b.x2.ceil().max(0.0) as usize).min(w);
        let y1 = (b.y2.ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        hits += obj.contains(px, py) as usize;
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / (SS * SS) as f64;
                    let p = &mut img[(y * w + x) * 3..(y * w + x) * 3 + 3];
                    for c in 0..3 {
                        p[c] = (1.0 - a) * p[c] + a * obj.color[c];
                    }
                }
            }
        }
    }
    img
}

fn quantize(img: &[f64]) -> Vec<u8> {
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Tight boxes of every object, clipped to the canvas.
pub fn scene_annotations(scene: &SceneSpec) -> Vec<LabeledBox> {
    scene
        .objects
        .iter()
        .filter_map(|o| {
            let b = o.extent().clip(scene.width as f64, scene.height as f64)?;
            Some(LabeledBox { bbox: b, class_id: o.shape.class_id() })
        })
        .collect()
}

/// Renders the scene and applies the domain transform. Noise is drawn from `rng`.
pub fn render_scene(scene: &SceneSpec, spec: &DomainSpec, domain: Domain, rng: &mut impl Rng) -> Result<ImageSample> {
    spec.validate()?;
    let mut img = rasterize(scene, spec.background_seed);
    rotate_hue(&mut img, spec.hue_shift);
    gaussian_blur(&mut img, scene.width, scene.height, spec.blur_sigma);
    if spec.noise_std > 0.0 {
        let n = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        img.iter_mut().for_each(|v| *v = (*v + n.sample(rng)).clamp(0.0, 1.0));
    }
    Ok(ImageSample {
        width: scene.width,
        height: scene.height,
        pixels: quantize(&img),
        domain,
        annotations: scene_annotations(scene),
        loose: false,
    })
}

/// Generates `n` images. Each image draws one seed from `rng`; its scene and
/// its noise derive from that seed alone, so two domains generated from the
/// same `rng` state share their scenes.
pub fn generate(n: usize, cfg: &SynthConfig, spec: &DomainSpec, domain: Domain, rng: &mut impl Rng) -> Result<Dataset> {
    cfg.validate()?;
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one image".into()));
    }
    (0..n)
        .map(|_| {
            let seed: u64 = rng.gen();
            let scene = sample_scene(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            render_scene(&scene, spec, domain, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    image: String,
    domain: Domain,
    loose: bool,
    boxes: Vec<LabeledBox>,
}

/// Writes `images/NNNNNN.png` (1-based) and `annotations.jsonl`.
pub fn write_dataset(data: &[ImageSample], out_dir: &Path) -> Result<()> {
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let index = out_dir.join("annotations.jsonl");
    let mut w = BufWriter::new(fs::File::create(&index).map_err(|e| Error::io(&index, e))?);
    for (i, s) in data.iter().enumerate() {
        let name = format!("images/{:06}.png", i + 1);
        let path = out_dir.join(&name);
        image::save_buffer_with_format(
            &path,
            &s.pixels,
            s.width as u32,
            s.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Image { path: path.clone(), source: e })?;
        let rec = Record { image: name, domain: s.domain, loose: s.loose, boxes: s.annotations.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&index, e))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))
}

/// Generates and writes a dataset; returns it as well.
pub fn gen_dataset(
    n: usize,
    cfg: &SynthConfig,
    spec: &DomainSpec,
    domain: Domain,
    rng: &mut impl Rng,
    out_dir: &Path,
) -> Result<Dataset> {
    let data = generate(n, cfg, spec, domain, rng)?;
    write_dataset(&data, out_dir)?;
    Ok(data)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index = dir.join("annotations.jsonl");
    let f = fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let path = dir.join(&rec.image);
        let img = image::open(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        for b in &rec.boxes {
            Box::new(b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2)?;
            if b.bbox.x1 < 0.0 || b.bbox.y1 < 0.0 || b.bbox.x2 > w as f64 || b.bbox.y2 > h as f64 {
                return Err(Error::InvalidBox(format!("{} has a box outside the image", rec.image)));
            }
        }
        out.push(ImageSample {
            width: w,
            height: h,
            pixels: img.into_raw(),
            domain: rec.domain,
            annotations: rec.boxes,
            loose: rec.loose,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no images", index.display())));
    }
    Ok(out)
}

/// Few-shot split: `n_images` images such that every sampled image holds a
/// required class and, when `n_images` allows, every required class appears
/// in the sample. Each keeps `min(boxes_per_image, available)` uniformly
/// chosen annotations and is marked loose.
pub fn loose_annotate(
    data: &[ImageSample],
    n_images: usize,
    boxes_per_image: usize,
    required_classes: &[usize],
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if n_images == 0 || boxes_per_image == 0 {
        return Err(Error::Protocol("few-shot split needs at least one image and one box".into()));
    }
    let has = |s: &ImageSample, c: usize| s.annotations.iter().any(|a| a.class_id == c);
    for &c in required_classes {
        if !data.iter().any(|s| has(s, c)) {
            return Err(Error::Protocol(format!("no image contains required class {c}")));
        }
    }
    let mut pool: Vec<usize> = (0..data.len())
        .filter(|&i| required_classes.is_empty() || required_classes.iter().any(|&c| has(&data[i], c)))
        .collect();
    if pool.len() < n_images {
        return Err(Error::Protocol(format!(
            "only {} images contain a required class, {n_images} requested",
            pool.len()
        )));
    }
    pool.shuffle(rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(n_images);
    for &c in required_classes {
        if chosen.len() == n_images {
            break;
        }
        if chosen.iter().any(|&i| has(&data[i], c)) {
            continue;
        }
        let pick = pool.iter().copied().find(|&i| !chosen.contains(&i) && has(&data[i], c));
        chosen.push(pick.expect("class presence checked above"));
    }
    for &i in &pool {
        if chosen.len() == n_images {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    Ok(chosen
        .into_iter()
        .map(|i| {
            let mut s = data[i].clone();
            let mut idx: Vec<usize> = (0..s.annotations.len()).collect();
            idx.shuffle(rng);
            idx.truncate(boxes_per_image);
            idx.sort_unstable();
            s.annotations = idx.into_iter().map(|k| data[i].annotations[k]).collect();
            s.loose = true;
            s.domain = Domain::Target;
            s
        })
        .collect())
}
