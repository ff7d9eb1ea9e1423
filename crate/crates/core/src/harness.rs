//! AP evaluation, the few-shot adaptation round protocol, ablation grids and
//! the sample-count sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{detect, DetectionResult, DetectorModel};
use crate::error::{Error, Result};
use crate::geometry::{iou, Box, LabeledBox};
use crate::smfr::FrozenSourceExtractor;
use crate::synthdata::{loose_annotate, ImageSample};
use crate::trainer::{adapt, AdaptConfig};

pub const AP_IOU: f64 = 0.5;
/// Minimum confidence kept for evaluation.
pub const EVAL_SCORE_THRESH: f64 = 1e-3;
pub const EVAL_NMS: f64 = 0.5;

/// All-point interpolated AP of one class. Detections are matched greedily in
/// descending confidence, ties by position in `detections`, each to the
/// unmatched GT of highest IOU. `None` when the class has no GT box.
///
/// `detections[i]` and `gts[i]` belong to image `i`.
pub fn compute_ap(detections: &[DetectionResult], gts: &[Vec<LabeledBox>], iou_thresh: f64, class_id: usize) -> Option<f64> {
    assert_eq!(detections.len(), gts.len(), "one detection list per image");
    let gt_boxes: Vec<Vec<Box>> =
        gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).map(|b| b.bbox).collect()).collect();
    let n_gt: usize = gt_boxes.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    // (score, image, box), stable-sorted so equal scores keep input order.
    let mut dets: Vec<(f64, usize, Box)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, d)| d.iter().filter(|d| d.bbox.class_id == class_id).map(move |d| (d.score, i, d.bbox.bbox)))
        .collect();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut matched: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (k, (_, img, b)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_boxes[*img].iter().enumerate() {
            let o = iou(b, g);
            if !matched[*img][j] && o >= iou_thresh && best.map_or(true, |(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            matched[*img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope, then area under the step curve.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// Absent when the class has no GT instance.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_thresh: f64,
    pub classes: Vec<ClassAp>,
    /// Mean over classes with at least one GT box; 0 when there are none.
    pub map: f64,
    pub num_images: usize,
}

/// Builds the report from precomputed detections.
pub fn ap_report(detections: &[DetectionResult], gts: &[Vec<LabeledBox>], iou_thresh: f64, num_classes: usize) -> ApReport {
    let classes: Vec<ClassAp> = (1..=num_classes)
        .map(|c| ClassAp {
            class_id: c,
            ap: compute_ap(detections, gts, iou_thresh, c),
            num_gt: gts.iter().flatten().filter(|b| b.class_id == c).count(),
            num_detections: detections.iter().flatten().filter(|d| d.bbox.class_id == c).count(),
        })
        .collect();
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    ApReport { iou_thresh, classes, map, num_images: gts.len() }
}

/// Runs `model` over `data` and scores it against the full annotations.
pub fn evaluate(model: &DetectorModel, data: &[ImageSample], iou_thresh: f64) -> Result<ApReport> {
    let mut dets = Vec::with_capacity(data.len());
    for s in data {
        dets.push(detect(model, &s.to_tensor(), EVAL_SCORE_THRESH, EVAL_NMS)?);
    }
    let gts: Vec<Vec<LabeledBox>> = data.iter().map(|s| s.annotations.clone()).collect();
    Ok(ap_report(&dets, &gts, iou_thresh, model.config.num_classes))
}

/// Per-image box budget of the few-shot split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BoxBudget {
    Exactly(usize),
    /// At most `n`, capped by availability; written `u<n>`.
    UpTo(usize),
}

impl BoxBudget {
    pub fn max_boxes(self) -> usize {
        match self {
            BoxBudget::Exactly(n) | BoxBudget::UpTo(n) => n,
        }
    }
}

impl fmt::Display for BoxBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxBudget::Exactly(n) => write!(f, "{n}"),
            BoxBudget::UpTo(n) => write!(f, "u{n}"),
        }
    }
}

impl FromStr for BoxBudget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("box budget must look like 3 or u6, got {s:?}"));
        let (up, digits) = match s.strip_prefix('u') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let n: usize = digits.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok(if up { BoxBudget::UpTo(n) } else { BoxBudget::Exactly(n) })
    }
}

impl Serialize for BoxBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BoxBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) if n > 0 => Ok(BoxBudget::Exactly(n)),
            Raw::N(n) => Err(serde::de::Error::custom(format!("box budget must be positive, got {n}"))),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdaProtocol {
    pub n_images: usize,
    pub boxes_per_image: BoxBudget,
    pub required_classes: Vec<usize>,
}

impl Default for FdaProtocol {
    fn default() -> Self {
        Self { n_images: 8, boxes_per_image: BoxBudget::Exactly(3), required_classes: vec![1, 2, 3] }
    }
}

/// Data of one experiment. The target pool and test split must be disjoint.
#[derive(Debug, Clone, Copy)]
pub struct FdaDatasets<'a> {
    pub source_train: &'a [ImageSample],
    pub target_pool: &'a [ImageSample],
    pub target_test: &'a [ImageSample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    /// FNV-1a of the canonical adaptation config JSON, hex.
    pub config_fingerprint: String,
    pub seed: u64,
    pub protocol: FdaProtocol,
    pub source: ApReport,
    pub adapted: ApReport,
    pub annotated_boxes: usize,
    pub steps: usize,
    pub skipped_image_terms: usize,
    pub skipped_instance_terms: usize,
}

impl RoundResult {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn config_fingerprint(cfg: &AdaptConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serialises");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Source model, its frozen copy, the data and the source model's test
/// report, shared by every round of an experiment.
pub struct Experiment<'a> {
    pub source_model: &'a DetectorModel,
    pub frozen: &'a FrozenSourceExtractor,
    pub data: FdaDatasets<'a>,
    pub source_report: ApReport,
}

impl<'a> Experiment<'a> {
    pub fn new(source_model: &'a DetectorModel, frozen: &'a FrozenSourceExtractor, data: FdaDatasets<'a>) -> Result<Self> {
        if data.target_test.is_empty() {
            return Err(Error::InvalidArgument("target test split is empty".into()));
        }
        if data.target_pool.iter().any(|p| data.target_test.iter().any(|t| t.pixels == p.pixels)) {
            return Err(Error::Protocol("target pool and test split share an image".into()));
        }
        let source_report = evaluate(source_model, data.target_test, AP_IOU)?;
        Ok(Self { source_model, frozen, data, source_report })
    }

    /// Samples and loosely annotates the few-shot split, adapts, and
    /// evaluates on the target test split. `cfg.seed` is replaced by `seed`.
    pub fn round(&self, protocol: &FdaProtocol, cfg: &AdaptConfig, seed: u64) -> Result<RoundResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = loose_annotate(
            self.data.target_pool,
            protocol.n_images,
            protocol.boxes_per_image.max_boxes(),
            &protocol.required_classes,
            &mut rng,
        )?;
        let cfg = AdaptConfig { seed, ..cfg.clone() };
        let (adapted, report) = adapt(self.source_model, self.frozen, self.data.source_train, &split, &cfg)?;
        let adapted_report =
            if cfg.steps == 0 { self.source_report.clone() } else { evaluate(&adapted, self.data.target_test, AP_IOU)? };
        Ok(RoundResult {
            config_fingerprint: config_fingerprint(&cfg),
            seed,
            protocol: protocol.clone(),
            source: self.source_report.clone(),
            adapted: adapted_report,
            annotated_boxes: split.iter().map(|s| s.annotations.len()).sum(),
            steps: cfg.steps,
            skipped_image_terms: report.skipped.image_terms,
            skipped_instance_terms: report.skipped.instance_terms,
        })
    }
}

/// One protocol round from scratch.
pub fn fda_round(
    source_model: &DetectorModel,
    frozen: &FrozenSourceExtractor,
    data: FdaDatasets<'_>,
    protocol: &FdaProtocol,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<RoundResult> {
    Experiment::new(source_model, frozen, data)?.round(protocol, cfg, seed)
}

/// A named set of field overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    #[serde(default)]
    pub set: serde_json::Map<String, serde_json::Value>,
}

impl AblationRow {
    pub fn new(name: &str, set: serde_json::Value) -> Self {
        let serde_json::Value::Object(set) = set else { panic!("row overrides must be a JSON object") };
        Self { name: name.into(), set }
    }

    pub fn apply(&self, base: &AdaptConfig) -> Result<AdaptConfig> {
        let mut v = serde_json::to_value(base)?;
        let obj = v.as_object_mut().expect("config is an object");
        for (k, val) in &self.set {
            obj.insert(k.clone(), val.clone());
        }
        let cfg: AdaptConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("row {:?}: {e}", self.name)))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toggles(sp: [bool; 3], ins: bool, ft: bool) -> serde_json::Value {
    serde_json::json!({"sp_s": sp[0], "sp_m": sp[1], "sp_l": sp[2], "ins": ins, "ft": ft})
}

/// The nine component combinations of the main comparison table.
pub fn component_rows() -> Vec<AblationRow> {
    let t = true;
    let f = false;
    vec![
        AblationRow::new("sp_s", toggles([t, f, f], f, f)),
        AblationRow::new("sp_m", toggles([f, t, f], f, f)),
        AblationRow::new("sp_l", toggles([f, f, t], f, f)),
        AblationRow::new("sp_s+sp_m+sp_l", toggles([t, t, t], f, f)),
        AblationRow::new("ins", toggles([f, f, f], t, f)),
        AblationRow::new("sp_s+sp_m+sp_l+ins", toggles([t, t, t], t, f)),
        AblationRow::new("ft", toggles([f, f, f], f, t)),
        AblationRow::new("sp_s+sp_m+sp_l+ft", toggles([t, t, t], f, t)),
        AblationRow::new("sp_s+sp_m+sp_l+ins+ft", toggles([t, t, t], t, t)),
    ]
}

pub fn pairing_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("pairing", serde_json::json!({"pairing": true})),
        AblationRow::new("no pairing", serde_json::json!({"pairing": false})),
    ]
}

pub fn sharing_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("shared", serde_json::json!({"share_discriminators": true})),
        AblationRow::new("per scale", serde_json::json!({"share_discriminators": false})),
    ]
}

/// ft-only with and without feature regularisation.
pub fn smfr_rows() -> Vec<AblationRow> {
    let mut ft = toggles([false; 3], false, true);
    let mut with = ft.clone();
    with["smfr"] = true.into();
    ft["smfr"] = false.into();
    vec![AblationRow::new("ft+smfr", with), AblationRow::new("ft", ft)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRowSummary {
    pub name: String,
    pub runs: usize,
    pub mean_map: Option<f64>,
    /// Sample standard deviation; needs two runs.
    pub std_map: Option<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub source_map: f64,
    pub rows: Vec<AblationRowSummary>,
}

pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Round outcome keyed by `(row index, seed)`.
pub type RoundTable = BTreeMap<(usize, u64), std::result::Result<RoundResult, String>>;

/// Aggregates completed rounds. The reduction walks seeds in ascending order,
/// so the result does not depend on execution order.
pub fn summarize(rows: &[AblationRow], source_map: f64, table: &RoundTable) -> AblationSummary {
    let rows = rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let mut maps = Vec::new();
            let mut failures = Vec::new();
            for ((_, seed), res) in table.range((r, 0)..=(r, u64::MAX)) {
                match res {
                    Ok(rr) => maps.push(rr.adapted.map),
                    Err(e) => failures.push(format!("seed {seed}: {e}")),
                }
            }
            let (mean_map, std_map) = mean_std(&maps);
            AblationRowSummary { name: row.name.clone(), runs: maps.len(), mean_map, std_map, failures }
        })
        .collect();
    AblationSummary { source_map, rows }
}

/// Runs every `(row, seed)` round in the given order, recording failures and
/// continuing. `on_round` sees each outcome as it completes.
pub fn run_grid(
    exp: &Experiment<'_>,
    protocol: &FdaProtocol,
    base: &AdaptConfig,
    rows: &[AblationRow],
    order: &[(usize, u64)],
    mut on_round: impl FnMut(usize, u64, &std::result::Result<RoundResult, String>),
) -> Result<RoundTable> {
    let cfgs = rows.iter().map(|r| r.apply(base)).collect::<Result<Vec<_>>>()?;
    let mut table = RoundTable::new();
    for &(r, seed) in order {
        let res = exp.round(protocol, &cfgs[r], seed).map_err(|e| e.to_string());
        on_round(r, seed, &res);
        table.insert((r, seed), res);
    }
    Ok(table)
}

pub fn ablation_grid(
    exp: &Experiment<'_>,
    protocol: &FdaProtocol,
    base: &AdaptConfig,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<AblationSummary> {
    let order: Vec<(usize, u64)> = (0..rows.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let table = run_grid(exp, protocol, base, rows, &order, |_, _, _| {})?;
    Ok(summarize(rows, exp.source_report.map, &table))
}

impl AblationSummary {
    /// `row,runs,mean_map,std_map,failures`; missing values are empty cells.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "runs", "mean_map", "std_map", "failures"])?;
        out.write_record(["source only", "", &format!("{:.9}", self.source_map), "", ""])?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.name.clone(),
                r.runs.to_string(),
                opt(r.mean_map),
                opt(r.std_map),
                r.failures.len().to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Io { path: "<summary>".into(), source: e })?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_images: usize,
    pub boxes: BoxBudget,
    pub runs: usize,
    pub mean_map: Option<f64>,
    pub std_map: Option<f64>,
}

/// Mean adapted mAP for every `(n_images, boxes)` combination.
pub fn sweep_samples(
    exp: &Experiment<'_>,
    cfg: &AdaptConfig,
    images: &[usize],
    boxes: &[BoxBudget],
    required_classes: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if images.is_empty() || boxes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep ranges must be non-empty".into()));
    }
    let mut cells = Vec::new();
    for &b in boxes {
        for &n in images {
            // Fewer images than required classes: require what fits.
            let req: Vec<usize> = required_classes.iter().copied().take(n).collect();
            let protocol = FdaProtocol { n_images: n, boxes_per_image: b, required_classes: req };
            let mut maps = Vec::new();
            for &seed in seeds {
                maps.push(exp.round(&protocol, cfg, seed)?.adapted.map);
            }
            let (mean_map, std_map) = mean_std(&maps);
            cells.push(SweepCell { n_images: n, boxes: b, runs: maps.len(), mean_map, std_map });
        }
    }
    Ok(cells)
}

/// `n_images,boxes,runs,mean_map,std_map`.
pub fn write_sweep_csv(cells: &[SweepCell], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n_images", "boxes", "runs", "mean_map", "std_map"])?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
    for c in cells {
        out.write_record([c.n_images.to_string(), c.boxes.to_string(), c.runs.to_string(), opt(c.mean_map), opt(c.std_map)])?;
    }
    out.flush().map_err(|e| Error::Io { path: "<sweep>".into(), source: e })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;
    use rand::Rng;

    fn lb(x: f64, c: usize) -> LabeledBox {
        LabeledBox { bbox: Box::new(x, 0.0, x + 10.0, 10.0).unwrap(), class_id: c }
    }

    fn det(x: f64, c: usize, score: f64) -> Detection {
        Detection { bbox: lb(x, c), score }
    }

    #[test]
    fn ap_examples() {
        let gt = vec![vec![lb(0.0, 1)]];
        assert_eq!(compute_ap(&[vec![det(0.0, 1, 0.9)]], &gt, 0.5, 1), Some(1.0));
        assert_eq!(compute_ap(&[vec![det(0.0, 1, 0.9), det(50.0, 1, 0.8)]], &gt, 0.5, 1), Some(1.0));
        assert_eq!(compute_ap(&[vec![det(50.0, 1, 0.9), det(0.0, 1, 0.8)]], &gt, 0.5, 1), Some(0.5));
        assert_eq!(compute_ap(&[vec![]], &gt, 0.5, 1), Some(0.0));
        assert_eq!(compute_ap(&[vec![det(0.0, 1, 0.9)]], &gt, 0.5, 2), None);
        // A duplicate of a matched detection is a false positive.
        assert_eq!(compute_ap(&[vec![det(0.0, 1, 0.9), det(0.0, 1, 0.8)]], &gt, 0.5, 1), Some(1.0));
        assert_eq!(compute_ap(&[vec![det(0.0, 1, 0.8), det(0.0, 1, 0.9)]], &gt, 0.5, 1), Some(1.0));
    }

    #[test]
    fn map_skips_classes_without_gt() {
        let gts = vec![vec![lb(0.0, 1)], vec![lb(0.0, 3)]];
        let dets = vec![vec![det(0.0, 1, 0.9), det(0.0, 2, 0.9)], vec![]];
        let r = ap_report(&dets, &gts, 0.5, 3);
        assert_eq!(r.classes[1].ap, None);
        assert_eq!(r.classes[1].num_detections, 1);
        assert_eq!(r.map, 0.5);
        let empty = ap_report(&[vec![], vec![]], &gts, 0.5, 3);
        assert_eq!(empty.map, 0.0);
        assert!(serde_json::to_string(&empty).unwrap().contains("\"map\":0.0"));
    }

    /// Independent route: for each prefix length `k` of the confidence order
    /// recompute the matching from scratch, then integrate the interpolated
    /// precision over the recall levels `j / n_gt` it can take.
    fn oracle_ap(dets: &[DetectionResult], gts: &[Vec<LabeledBox>], t: f64, cls: usize) -> Option<f64> {
        let n_gt = gts.iter().flatten().filter(|b| b.class_id == cls).count();
        if n_gt == 0 {
            return None;
        }
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            for (j, x) in d.iter().enumerate() {
                if x.bbox.class_id == cls {
                    order.push((i, j));
                }
            }
        }
        // Insertion sort on descending score keeps ties in input order.
        for a in 1..order.len() {
            let mut b = a;
            while b > 0 && dets[order[b - 1].0][order[b - 1].1].score < dets[order[b].0][order[b].1].score {
                order.swap(b - 1, b);
                b -= 1;
            }
        }
        let mut points = Vec::new();
        for k in 1..=order.len() {
            let mut used = std::collections::HashSet::new();
            let mut tp = 0;
            for &(i, j) in &order[..k] {
                let d = &dets[i][j].bbox.bbox;
                let cand = gts[i]
                    .iter()
                    .enumerate()
                    .filter(|(g, b)| b.class_id == cls && !used.contains(&(i, *g)) && iou(d, &b.bbox) >= t)
                    .fold(None, |acc: Option<(usize, f64)>, (g, b)| {
                        let o = iou(d, &b.bbox);
                        match acc {
                            Some((_, bo)) if bo >= o => acc,
                            _ => Some((g, o)),
                        }
                    });
                if let Some((g, _)) = cand {
                    used.insert((i, g));
                    tp += 1;
                }
            }
            points.push((tp as f64 / k as f64, tp));
        }
        let mut ap = 0.0;
        for j in 1..=n_gt {
            let best = points.iter().filter(|(_, tp)| *tp >= j).map(|(p, _)| *p).fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
        Some(ap)
    }

    #[test]
    fn ap_matches_threshold_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for _ in 0..500 {
            let n_img = rng.gen_range(1..=2);
            let mut gts: Vec<Vec<LabeledBox>> = vec![Vec::new(); n_img];
            for _ in 0..rng.gen_range(0..=4) {
                let i = rng.gen_range(0..n_img);
                gts[i].push(lb(rng.gen_range(0..4) as f64 * 6.0, rng.gen_range(1..=2)));
            }
            let mut dets: Vec<DetectionResult> = vec![Vec::new(); n_img];
            for _ in 0..rng.gen_range(0..=6) {
                let i = rng.gen_range(0..n_img);
                // Coarse scores make ties common.
                let score = rng.gen_range(1..=4) as f64 / 4.0;
                dets[i].push(det(rng.gen_range(0..5) as f64 * 6.0 + rng.gen_range(-2.0..2.0), rng.gen_range(1..=2), score));
            }
            for cls in 1..=2 {
                let a = compute_ap(&dets, &gts, 0.5, cls);
                let b = oracle_ap(&dets, &gts, 0.5, cls);
                match (a, b) {
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() <= 1e-9, "{a} vs {b}: {dets:?} {gts:?}");
                        assert!((0.0..=1.0).contains(&a));
                        checked += 1;
                    }
                    (None, None) => {}
                    other => panic!("definedness differs: {other:?}"),
                }
            }
        }
        assert!(checked > 300);
    }

    #[test]
    fn box_budget_labels() {
        assert_eq!("u6".parse::<BoxBudget>().unwrap(), BoxBudget::UpTo(6));
        assert_eq!("3".parse::<BoxBudget>().unwrap(), BoxBudget::Exactly(3));
        assert!("u".parse::<BoxBudget>().is_err());
        assert!("0".parse::<BoxBudget>().is_err());
        assert_eq!(BoxBudget::UpTo(6).to_string(), "u6");
        let p: FdaProtocol =
            serde_json::from_str(r#"{"n_images":1,"boxes_per_image":"u6","required_classes":[]}"#).unwrap();
        assert_eq!(p.boxes_per_image, BoxBudget::UpTo(6));
        let p: FdaProtocol = serde_json::from_str(r#"{"n_images":1,"boxes_per_image":3,"required_classes":[]}"#).unwrap();
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"n_images":1,"boxes_per_image":"3","required_classes":[]}"#);
    }

    #[test]
    fn rows_mirror_table_structure() {
        let rows = component_rows();
        assert_eq!(rows.len(), 9);
        let base = AdaptConfig::default();
        let full = rows[8].apply(&base).unwrap();
        assert!(full.sp_s && full.sp_m && full.sp_l && full.ins && full.ft);
        let ft = rows[6].apply(&base).unwrap();
        assert!(ft.ft && !ft.ins && ft.enabled_scales().is_empty());
        let s = smfr_rows();
        assert!(s[0].apply(&base).unwrap().smfr && !s[1].apply(&base).unwrap().smfr);
        assert!(!pairing_rows()[1].apply(&base).unwrap().pairing);
        assert!(!sharing_rows()[1].apply(&base).unwrap().share_discriminators);
        assert!(AblationRow::new("bad", serde_json::json!({"nope": 1})).apply(&base).is_err());
    }

    fn fake_round(map: f64, seed: u64) -> RoundResult {
        let rep = ApReport { iou_thresh: 0.5, classes: Vec::new(), map, num_images: 1 };
        RoundResult {
            config_fingerprint: String::new(),
            seed,
            protocol: FdaProtocol::default(),
            source: rep.clone(),
            adapted: rep,
            annotated_boxes: 0,
            steps: 0,
            skipped_image_terms: 0,
            skipped_instance_terms: 0,
        }
    }

    #[test]
    fn summary_is_order_invariant() {
        let rows = pairing_rows();
        let outcomes: Vec<((usize, u64), std::result::Result<RoundResult, String>)> = vec![
            ((0, 0), Ok(fake_round(0.1, 0))),
            ((0, 1), Ok(fake_round(0.7, 1))),
            ((0, 2), Ok(fake_round(0.3000001, 2))),
            ((1, 0), Ok(fake_round(0.5, 0))),
            ((1, 1), Err("diverged".into())),
        ];
        let forward: RoundTable = outcomes.iter().cloned().collect();
        let reverse: RoundTable = outcomes.iter().rev().cloned().collect();
        let a = summarize(&rows, 0.2, &forward);
        assert_eq!(a, summarize(&rows, 0.2, &reverse));
        assert_eq!(a.rows[0].runs, 3);
        assert!((a.rows[0].mean_map.unwrap() - 1.1000001 / 3.0).abs() < 1e-12);
        assert_eq!(a.rows[1].std_map, None);
        assert_eq!(a.rows[1].failures.len(), 1);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("source only,,0.200000000"));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[]), (None, None));
        assert_eq!(mean_std(&[2.0]), (Some(2.0), None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 1.0).abs() < 1e-15);
    }
}
