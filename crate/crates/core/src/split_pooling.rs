//! Random-offset grids over the input image whose full interior cells are
//! ROI-pooled into fixed-size patch features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{roi_pool, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{window_extent, Box};
use crate::nn::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleGroup {
    Small,
    Medium,
    Large,
}

impl ScaleGroup {
    pub const ALL: [ScaleGroup; 3] = [ScaleGroup::Small, ScaleGroup::Medium, ScaleGroup::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleGroup::Small => "small",
            ScaleGroup::Medium => "medium",
            ScaleGroup::Large => "large",
        }
    }
}

/// Window scales per group (small, medium, large), shared ratios, and the
/// pooled patch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPoolConfig {
    pub scales: [f64; 3],
    pub ratios: Vec<f64>,
    pub out_size: usize,
}

impl Default for SplitPoolConfig {
    fn default() -> Self {
        Self { scales: [96.0, 160.0, 256.0], ratios: vec![0.5, 1.0, 2.0], out_size: 3 }
    }
}

impl SplitPoolConfig {
    /// Scales halved for 256x256 canvases.
    pub fn desk() -> Self {
        Self { scales: [48.0, 80.0, 128.0], ..Self::default() }
    }

    pub fn scale(&self, group: ScaleGroup) -> f64 {
        self.scales[group.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub scale_group: ScaleGroup,
    pub window_w: usize,
    pub window_h: usize,
    pub offset_sx: usize,
    pub offset_sy: usize,
}

/// Patch features of one image at one scale group, `[n, C, out, out]`.
#[derive(Debug, Clone)]
pub struct PatchFeatureSet {
    pub scale_group: ScaleGroup,
    /// `None` when no grid produced a full cell.
    pub features: Option<Var>,
    pub cells: Vec<Box>,
    pub source_domain: bool,
}

impl PatchFeatureSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Window of area `scale^2` with `h / w = ratio`, rounded to whole pixels.
pub fn window_dims(scale: f64, ratio: f64) -> Result<(usize, usize)> {
    if !(scale > 0.0 && ratio > 0.0 && scale.is_finite() && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!("window needs positive scale and ratio, got ({scale}, {ratio})")));
    }
    let (w, h) = window_extent(scale, ratio);
    Ok((w.round() as usize, h.round() as usize))
}

/// Uniform offsets on `{1..w-1} x {1..h-1}`.
pub fn sample_offsets(rng: &mut impl Rng, window_w: usize, window_h: usize) -> Result<(usize, usize)> {
    if window_w < 2 || window_h < 2 {
        return Err(Error::InvalidArgument(format!("window {window_w}x{window_h} leaves no interior offset")));
    }
    Ok((rng.gen_range(1..window_w), rng.gen_range(1..window_h)))
}

fn axis_starts(image: usize, window: usize, offset: usize) -> impl Iterator<Item = usize> {
    // Grid lines sit at offset + k * window; offset < window, so the first
    // full cell starts at the offset itself.
    let count = if image >= offset { (image - offset) / window } else { 0 };
    (0..count).map(move |k| offset + k * window)
}

/// Full `window_w x window_h` grid cells lying inside the image, row-major.
pub fn enumerate_cells(image_w: usize, image_h: usize, grid: &GridSpec) -> Vec<Box> {
    let mut cells = Vec::new();
    for y in axis_starts(image_h, grid.window_h, grid.offset_sy) {
        for x in axis_starts(image_w, grid.window_w, grid.offset_sx) {
            cells.push(Box {
                x1: x as f64,
                y1: y as f64,
                x2: (x + grid.window_w) as f64,
                y2: (y + grid.window_h) as f64,
            });
        }
    }
    cells
}

/// Samples one fresh grid per ratio of `group`, and pools every full cell.
pub fn split_pool(
    g: &mut Graph,
    fm: &FeatureMap,
    image_dims: (usize, usize),
    group: ScaleGroup,
    cfg: &SplitPoolConfig,
    source_domain: bool,
    rng: &mut impl Rng,
) -> Result<PatchFeatureSet> {
    let mut cells = Vec::new();
    for &ratio in &cfg.ratios {
        let (w, h) = window_dims(cfg.scale(group), ratio)?;
        let (sx, sy) = sample_offsets(rng, w, h)?;
        let grid = GridSpec { scale_group: group, window_w: w, window_h: h, offset_sx: sx, offset_sy: sy };
        cells.extend(enumerate_cells(image_dims.0, image_dims.1, &grid));
    }
    let features = (!cells.is_empty()).then(|| roi_pool(g, fm, &cells, (cfg.out_size, cfg.out_size)));
    Ok(PatchFeatureSet { scale_group: group, features, cells, source_domain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize, sx: usize, sy: usize) -> GridSpec {
        GridSpec { scale_group: ScaleGroup::Small, window_w: w, window_h: h, offset_sx: sx, offset_sy: sy }
    }

    /// Every grid rectangle from k = -2 upward, kept when fully inside.
    fn brute_force_cells(iw: usize, ih: usize, g: &GridSpec) -> usize {
        let lines = |off: usize, win: usize, dim: usize| {
            (-2i64..=(dim / win) as i64 + 2).map(move |k| off as i64 + k * win as i64).collect::<Vec<_>>()
        };
        let mut n = 0;
        for &y in &lines(g.offset_sy, g.window_h, ih) {
            for &x in &lines(g.offset_sx, g.window_w, iw) {
                if x >= 0 && y >= 0 && x + g.window_w as i64 <= iw as i64 && y + g.window_h as i64 <= ih as i64 {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn window_dims_examples() {
        assert_eq!(window_dims(256.0, 1.0).unwrap(), (256, 256));
        assert_eq!(window_dims(96.0, 2.0).unwrap(), (68, 136));
        let cfg = SplitPoolConfig::default();
        let pairs: Vec<_> = cfg
            .scales
            .iter()
            .flat_map(|&s| cfg.ratios.iter().map(move |&r| window_dims(s, r).unwrap()))
            .collect();
        assert_eq!(pairs.len(), 9);
        assert!(window_dims(0.0, 1.0).is_err());
        assert!(window_dims(96.0, -1.0).is_err());
    }

    #[test]
    fn offsets_in_range_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (sx, sy) = sample_offsets(&mut rng, 256, 256).unwrap();
            assert!((1..=255).contains(&sx) && (1..=255).contains(&sy));
        }
        let a = sample_offsets(&mut ChaCha8Rng::seed_from_u64(5), 40, 30).unwrap();
        let b = sample_offsets(&mut ChaCha8Rng::seed_from_u64(5), 40, 30).unwrap();
        assert_eq!(a, b);
        assert!(sample_offsets(&mut rng, 1, 10).is_err());
    }

    #[test]
    fn offsets_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 16];
        for _ in 0..10_000 {
            counts[sample_offsets(&mut rng, 16, 16).unwrap().0] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!(counts[1..].iter().all(|&c| c > 0));
        let expected = 10_000.0 / 15.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 14 degrees of freedom: P(chi2 > 36.12) = 0.001.
        assert!(chi2 < 36.12, "chi2 = {chi2}");
    }

    #[test]
    fn enumerate_cells_examples() {
        assert_eq!(
            enumerate_cells(512, 512, &grid(256, 256, 100, 100)),
            vec![Box { x1: 100.0, y1: 100.0, x2: 356.0, y2: 356.0 }]
        );
        assert_eq!(enumerate_cells(512, 512, &grid(96, 96, 16, 16)).len(), 25);
        assert!(enumerate_cells(64, 64, &grid(96, 96, 16, 16)).is_empty());
    }

    #[test]
    fn cell_counts_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let iw = rng.gen_range(1..600);
            let ih = rng.gen_range(1..600);
            let (ww, wh) = (rng.gen_range(2..300), rng.gen_range(2..300));
            let (sx, sy) = sample_offsets(&mut rng, ww, wh).unwrap();
            let g = grid(ww, wh, sx, sy);
            let cells = enumerate_cells(iw, ih, &g);
            assert_eq!(cells.len(), brute_force_cells(iw, ih, &g));
            for c in &cells {
                assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= iw as f64 && c.y2 <= ih as f64);
                assert_eq!((c.width(), c.height()), (ww as f64, wh as f64));
            }
        }
    }

    #[test]
    fn random_grids_cover_interior() {
        let (size, win) = (512usize, 96usize);
        let mut covered = vec![false; size * size];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (sx, sy) = sample_offsets(&mut rng, win, win).unwrap();
            for c in enumerate_cells(size, size, &grid(win, win, sx, sy)) {
                for y in c.y1 as usize..c.y2 as usize {
                    covered[y * size + c.x1 as usize..y * size + c.x2 as usize].fill(true);
                }
            }
        }
        let margin = win / 2;
        let interior: Vec<bool> = (margin..size - margin)
            .flat_map(|y| (margin..size - margin).map(move |x| (x, y)))
            .map(|(x, y)| covered[y * size + x])
            .collect();
        let frac = interior.iter().filter(|&&c| c).count() as f64 / interior.len() as f64;
        assert!(frac >= 0.99, "coverage {frac}");
    }

    fn constant_map(g: &mut Graph, c: usize, h: usize, w: usize, v: f64) -> FeatureMap {
        let var = g.constant(Tensor::new(vec![1, c, h, w], vec![v; c * h * w]));
        FeatureMap { var, channels: c, height: h, width: w, stride: 16 }
    }

    #[test]
    fn split_pool_count_is_sum_over_ratio_grids() {
        let cfg = SplitPoolConfig::default();
        let mut g = Graph::new();
        let fm = constant_map(&mut g, 2, 32, 32, 0.5);
        let set = split_pool(&mut g, &fm, (512, 512), ScaleGroup::Small, &cfg, true, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut expect = 0;
        for &r in &cfg.ratios {
            let (w, h) = window_dims(96.0, r).unwrap();
            let (sx, sy) = sample_offsets(&mut rng, w, h).unwrap();
            expect += enumerate_cells(512, 512, &grid(w, h, sx, sy)).len();
        }
        assert_eq!(set.len(), expect);
        let v = g.value(set.features.unwrap());
        assert_eq!(v.shape, vec![expect, 2, 3, 3]);
        assert!(v.data.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn large_square_cell_spans_sixteen_feature_cells() {
        let cell = Box { x1: 32.0, y1: 48.0, x2: 288.0, y2: 304.0 };
        let r = crate::detector::project_box(&cell, 16, 32, 32);
        assert_eq!((r.r1 - r.r0, r.c1 - r.c0), (16, 16));
    }

    #[test]
    fn image_smaller_than_windows_gives_empty_set() {
        let mut g = Graph::new();
        let fm = constant_map(&mut g, 1, 2, 2, 1.0);
        let set = split_pool(
            &mut g,
            &fm,
            (32, 32),
            ScaleGroup::Large,
            &SplitPoolConfig::default(),
            false,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(set.is_empty() && set.features.is_none());
    }

    proptest! {
        #[test]
        fn cells_are_inside_and_exact(iw in 1usize..400, ih in 1usize..400, ww in 2usize..200, wh in 2usize..200, seed: u64) {
            let (sx, sy) = sample_offsets(&mut ChaCha8Rng::seed_from_u64(seed), ww, wh).unwrap();
            prop_assert!(sx >= 1 && sx < ww && sy >= 1 && sy < wh);
            for c in enumerate_cells(iw, ih, &grid(ww, wh, sx, sy)) {
                prop_assert!(c.x1 >= 0.0 && c.x2 <= iw as f64 && c.y1 >= 0.0 && c.y2 <= ih as f64);
                prop_assert_eq!(c.width(), ww as f64);
                prop_assert_eq!(c.height(), wh as f64);
            }
        }
    }
}
