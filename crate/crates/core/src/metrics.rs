//! Detection evaluation against ground truth: the FPPI / miss-rate curve,
//! log-average miss rate over FPPI in [1e-2, 1e0], and all-point
//! interpolated average precision.
//!
//! Ground truth is only ever consumed here. The re-ranking pipeline never
//! sees it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox, DetectionSet};
use crate::error::{Error, Result};

/// Number of log-spaced FPPI reference points.
pub const MR_SAMPLE_POINTS: usize = 9;
/// Miss rates are floored at this value before taking logs.
pub const MR_FLOOR: f64 = 1e-6;
pub const DEFAULT_IOU_EVAL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub bbox: BBox,
    #[serde(default)]
    pub ignore: bool,
    /// Free-form numeric attributes (height, occlusion, ...) for subset
    /// filters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    images: Vec<String>,
    boxes: Vec<GtBox>,
}

impl GroundTruthSet {
    /// `images` lists every evaluated image, including those without any
    /// ground truth. Images referenced by boxes are added if missing.
    pub fn new(images: Vec<String>, boxes: Vec<GtBox>) -> Self {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut ordered = Vec::new();
        for id in images.into_iter().chain(boxes.iter().map(|b| b.image_id.clone())) {
            if seen.insert(id.clone()) {
                ordered.push(id);
            }
        }
        GroundTruthSet {
            images: ordered,
            boxes,
        }
    }

    pub fn images(&self) -> &[String] {
        &self.images
    }

    pub fn boxes(&self) -> &[GtBox] {
        &self.boxes
    }

    pub fn non_ignored(&self) -> usize {
        self.boxes.iter().filter(|b| !b.ignore).count()
    }

    /// Restriction to the given images.
    pub fn subset<'a>(&self, images: impl IntoIterator<Item = &'a str>) -> GroundTruthSet {
        let keep: BTreeSet<&str> = images.into_iter().collect();
        GroundTruthSet {
            images: self
                .images
                .iter()
                .filter(|i| keep.contains(i.as_str()))
                .cloned()
                .collect(),
            boxes: self
                .boxes
                .iter()
                .filter(|b| keep.contains(b.image_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Copy in which boxes rejected by `filter` become ignore regions.
    pub fn filtered(&self, filter: &GtFilter) -> GroundTruthSet {
        let mut out = self.clone();
        for b in &mut out.boxes {
            if !filter.accepts(b) {
                b.ignore = true;
            }
        }
        out
    }
}

/// Attribute-range predicate over ground-truth boxes. A box passes when each
/// named attribute is present and lies in its closed range.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GtFilter {
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl GtFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn range(mut self, attribute: impl Into<String>, min: f64, max: f64) -> Self {
        self.ranges.insert(attribute.into(), (min, max));
        self
    }

    pub fn accepts(&self, b: &GtBox) -> bool {
        self.ranges.iter().all(|(name, &(lo, hi))| {
            b.attributes
                .get(name)
                .is_some_and(|&v| v >= lo && v <= hi)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Detections with confidence at or above this value are kept.
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub log_avg_mr: f64,
    pub ap: f64,
    pub curve: Vec<CurvePoint>,
    pub num_images: usize,
    pub num_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ignored_detections: usize,
    pub missed_gt: usize,
}

impl EvalReport {
    /// Two-column CSV of the miss-rate curve.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("fppi,miss_rate\n");
        for p in &self.curve {
            out.push_str(&format!("{},{}\n", p.fppi, p.miss_rate));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Greedy per-image matching, detections visited by confidence descending
/// (ties by box id). A detection takes the unmatched non-ignored ground
/// truth of highest IoU at or above `iou_eval`; failing that, overlap with an
/// ignore region makes it neither true nor false positive.
pub fn match_detections(
    dets: &DetectionSet,
    gt: &GroundTruthSet,
    iou_eval: f64,
) -> BTreeMap<u64, MatchOutcome> {
    let mut gt_by_image: HashMap<&str, Vec<&GtBox>> = HashMap::new();
    for g in gt.boxes() {
        gt_by_image.entry(g.image_id.as_str()).or_default().push(g);
    }
    let mut det_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.boxes().iter().enumerate() {
        det_by_image.entry(d.image_id.as_str()).or_default().push(i);
    }

    let mut outcomes = BTreeMap::new();
    for (image, mut idx) in det_by_image {
        let boxes = dets.boxes();
        idx.sort_by(|&a, &b| {
            boxes[b]
                .confidence
                .total_cmp(&boxes[a].confidence)
                .then(boxes[a].box_id.cmp(&boxes[b].box_id))
        });
        let gts = gt_by_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let mut taken = vec![false; gts.len()];
        for i in idx {
            let d = &boxes[i];
            let mut best: Option<(usize, f64)> = None;
            let mut hits_ignore = false;
            for (j, g) in gts.iter().enumerate() {
                let overlap = iou(&d.bbox, &g.bbox);
                if overlap < iou_eval {
                    continue;
                }
                if g.ignore {
                    hits_ignore = true;
                } else if !taken[j] && best.map_or(true, |(_, o)| overlap > o) {
                    best = Some((j, overlap));
                }
            }
            let outcome = if let Some((j, _)) = best {
                taken[j] = true;
                MatchOutcome::TruePositive
            } else if hits_ignore {
                MatchOutcome::Ignored
            } else {
                MatchOutcome::FalsePositive
            };
            outcomes.insert(d.box_id, outcome);
        }
    }
    outcomes
}

/// FPPI reference points, evenly spaced in log10 over [1e-2, 1e0].
pub fn fppi_reference_points() -> [f64; MR_SAMPLE_POINTS] {
    let mut refs = [0.0; MR_SAMPLE_POINTS];
    for (i, r) in refs.iter_mut().enumerate() {
        *r = 10f64.powf(-2.0 + 2.0 * i as f64 / (MR_SAMPLE_POINTS - 1) as f64);
    }
    refs
}

/// Geometric mean of the lowest miss rate reached at FPPI at or below each
/// reference point. Reference points no curve point reaches count as a
/// miss rate of one.
pub fn log_average_miss_rate(curve: &[CurvePoint]) -> f64 {
    let refs = fppi_reference_points();
    let sum_logs: f64 = refs
        .iter()
        .map(|&r| {
            let mr = curve
                .iter()
                .filter(|p| p.fppi <= r)
                .map(|p| p.miss_rate)
                .fold(1.0, f64::min);
            mr.max(MR_FLOOR).ln()
        })
        .sum();
    (sum_logs / refs.len() as f64).exp()
}

/// All-point interpolated AP over curve points ordered by threshold
/// descending.
pub fn average_precision(curve: &[CurvePoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

pub fn evaluate(dets: &DetectionSet, gt: &GroundTruthSet, iou_eval: f64) -> Result<EvalReport> {
    let num_gt = gt.non_ignored();
    if num_gt == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let images: BTreeSet<&str> = gt
        .images()
        .iter()
        .map(String::as_str)
        .chain(dets.boxes().iter().map(|d| d.image_id.as_str()))
        .collect();
    let num_images = images.len();

    let outcomes = match_detections(dets, gt, iou_eval);
    let mut scored: Vec<(f64, bool)> = dets
        .boxes()
        .iter()
        .filter_map(|d| match outcomes[&d.box_id] {
            MatchOutcome::TruePositive => Some((d.confidence, true)),
            MatchOutcome::FalsePositive => Some((d.confidence, false)),
            MatchOutcome::Ignored => None,
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    // one curve point per distinct confidence
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / num_gt as f64;
        curve.push(CurvePoint {
            threshold,
            fppi: fp as f64 / num_images as f64,
            miss_rate: 1.0 - recall,
            recall,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }

    let ignored_detections = outcomes
        .values()
        .filter(|o| **o == MatchOutcome::Ignored)
        .count();
    Ok(EvalReport {
        log_avg_mr: log_average_miss_rate(&curve),
        ap: average_precision(&curve),
        curve,
        num_images,
        num_gt,
        true_positives: tp,
        false_positives: fp,
        ignored_detections,
        missed_gt: num_gt - tp,
    })
}
