//! Box value types and the geometric operations the pipeline needs: IoU,
//! greedy NMS, and matching of initial boxes to re-predicted ones.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in corner form, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::InvalidBox(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Builds a box from top-left corner plus width and height.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Pseudo-label state of a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Ignored,
    #[default]
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    #[serde(alias = "val")]
    Validation,
}

impl Role {
    /// Split name used on the bridge wire.
    pub fn split_name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "val",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.split_name())
    }
}

/// One detected box with its confidence and per-box feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub box_id: u64,
    pub image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub feature: Vec<f64>,
    pub cluster_id: Option<usize>,
    pub label: Label,
}

impl DetBox {
    pub fn new(
        box_id: u64,
        image_id: impl Into<String>,
        bbox: BBox,
        confidence: f64,
        feature: Vec<f64>,
    ) -> Self {
        DetBox {
            box_id,
            image_id: image_id.into(),
            bbox,
            confidence,
            feature,
            cluster_id: None,
            label: Label::Unlabeled,
        }
    }

    fn validate(&self, feature_dim: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidDetectionSet(format!(
                "box {}: confidence {} outside [0, 1]",
                self.box_id, self.confidence
            )));
        }
        if self.feature.len() != feature_dim {
            return Err(Error::InvalidDetectionSet(format!(
                "box {}: feature length {} != feature_dim {}",
                self.box_id,
                self.feature.len(),
                feature_dim
            )));
        }
        if let Some(v) = self.feature.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDetectionSet(format!(
                "box {}: non-finite feature value {v}",
                self.box_id
            )));
        }
        Ok(())
    }
}

/// A validated, ordered collection of boxes sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    boxes: Vec<DetBox>,
    feature_dim: usize,
    role: Role,
    source: Option<String>,
}

impl DetectionSet {
    pub fn new(boxes: Vec<DetBox>, feature_dim: usize, role: Role) -> Result<Self> {
        let mut seen = HashSet::with_capacity(boxes.len());
        for b in &boxes {
            b.validate(feature_dim)?;
            if !seen.insert(b.box_id) {
                return Err(Error::InvalidDetectionSet(format!(
                    "duplicate box_id {}",
                    b.box_id
                )));
            }
        }
        Ok(DetectionSet {
            boxes,
            feature_dim,
            role,
            source: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn boxes(&self) -> &[DetBox] {
        &self.boxes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn get(&self, box_id: u64) -> Option<&DetBox> {
        self.boxes.iter().find(|b| b.box_id == box_id)
    }

    /// Box id to confidence, in box order.
    pub fn confidences(&self) -> BTreeMap<u64, f64> {
        self.boxes.iter().map(|b| (b.box_id, b.confidence)).collect()
    }

    /// Copy of the set with confidences replaced from `updated`. Boxes not in
    /// the map keep their confidence. Geometry and features are untouched.
    pub fn with_confidences(&self, updated: &BTreeMap<u64, f64>) -> DetectionSet {
        let mut out = self.clone();
        for b in &mut out.boxes {
            if let Some(&c) = updated.get(&b.box_id) {
                b.confidence = c.clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Copy of the set with labels and cluster ids filled in.
    pub fn annotated(
        &self,
        labels: impl Fn(u64) -> Label,
        clusters: &BTreeMap<u64, usize>,
    ) -> DetectionSet {
        let mut out = self.clone();
        for b in &mut out.boxes {
            b.label = labels(b.box_id);
            b.cluster_id = clusters.get(&b.box_id).copied();
        }
        out
    }
}

/// A box emitted by a re-prediction: geometry, confidence, image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Greedy NMS returning indices into `boxes` in selection order.
///
/// Boxes are visited by confidence descending, ties by `box_id` ascending. A
/// box is kept iff its IoU with every kept box of the same image is below
/// `iou_threshold`.
pub fn nms_indices(boxes: &[DetBox], iou_threshold: f64) -> Vec<usize> {
    debug_assert!(iou_threshold > 0.0 && iou_threshold <= 1.0);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .confidence
            .total_cmp(&boxes[a].confidence)
            .then(boxes[a].box_id.cmp(&boxes[b].box_id))
    });

    let mut kept_per_image: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut kept = Vec::new();
    for idx in order {
        let cand = &boxes[idx];
        let same_image = kept_per_image.entry(cand.image_id.as_str()).or_default();
        let suppressed = same_image
            .iter()
            .any(|&k| iou(&boxes[k].bbox, &cand.bbox) >= iou_threshold);
        if !suppressed {
            same_image.push(idx);
            kept.push(idx);
        }
    }
    kept
}

/// Greedy per-image NMS. Output boxes are clones of input boxes in selection
/// order.
pub fn nms(boxes: &[DetBox], iou_threshold: f64) -> Vec<DetBox> {
    nms_indices(boxes, iou_threshold)
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect()
}

/// Confidence update of initial boxes from a re-prediction.
///
/// Each initial box independently takes the confidence of the same-image
/// candidate with the greatest IoU (lowest candidate index on ties), provided
/// that IoU is strictly greater than `iou_min`; otherwise its confidence is
/// zeroed. Several initial boxes may take the same candidate.
pub fn match_boxes(
    initial: &DetectionSet,
    repredicted: &[ScoredBox],
    iou_min: f64,
) -> BTreeMap<u64, f64> {
    let mut by_image: HashMap<&str, Vec<&ScoredBox>> = HashMap::new();
    for cand in repredicted {
        by_image.entry(cand.image_id.as_str()).or_default().push(cand);
    }

    initial
        .boxes()
        .iter()
        .map(|b| {
            let mut best: Option<(f64, f64)> = None;
            if let Some(cands) = by_image.get(b.image_id.as_str()) {
                for cand in cands {
                    let overlap = iou(&b.bbox, &cand.bbox);
                    if best.map_or(true, |(o, _)| overlap > o) {
                        best = Some((overlap, cand.confidence));
                    }
                }
            }
            let conf = match best {
                Some((overlap, c)) if overlap > iou_min => c.clamp(0.0, 1.0),
                _ => 0.0,
            };
            (b.box_id, conf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(id: u64, img: &str, b: BBox, c: f64) -> DetBox {
        DetBox::new(id, img, b, c, vec![0.0])
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        let third = iou(&a, &bb(5.0, 0.0, 15.0, 10.0));
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
        // touching edges share no area
        assert_eq!(iou(&a, &bb(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(0.0, 5.0, 3.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert_eq!(
            BBox::from_xywh(2.0, 3.0, 4.0, 5.0).unwrap(),
            bb(2.0, 3.0, 6.0, 8.0)
        );
    }

    #[test]
    fn nms_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[det(0, "i", a, 0.9), det(1, "i", a, 0.8)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].box_id, 0);

        let kept = nms(
            &[
                det(0, "i", a, 0.9),
                det(1, "i", bb(20.0, 20.0, 30.0, 30.0), 0.8),
            ],
            0.5,
        );
        assert_eq!(kept.len(), 2);

        // A suppresses B (IoU 81/119), C survives (IoU with A is 4/196)
        let boxes = [
            det(0, "i", a, 0.9),
            det(1, "i", bb(1.0, 1.0, 11.0, 11.0), 0.8),
            det(2, "i", bb(8.0, 8.0, 18.0, 18.0), 0.7),
        ];
        let ids: Vec<u64> = nms(&boxes, 0.5).iter().map(|b| b.box_id).collect();
        assert_eq!(ids, vec![0, 2]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_is_per_image_and_breaks_ties_by_id() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let kept = nms(&[det(5, "x", a, 0.5), det(3, "x", a, 0.5)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].box_id, 3);

        let kept = nms(&[det(0, "x", a, 0.9), det(1, "y", a, 0.8)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn match_examples() {
        let set = DetectionSet::new(
            vec![det(7, "img", bb(0.0, 0.0, 10.0, 10.0), 0.3)],
            1,
            Role::Train,
        )
        .unwrap();
        let sb = |b: BBox, c: f64| ScoredBox {
            image_id: "img".into(),
            bbox: b,
            confidence: c,
        };

        let m = match_boxes(
            &set,
            &[
                sb(bb(1.0, 1.0, 11.0, 11.0), 0.8),
                sb(bb(8.0, 8.0, 18.0, 18.0), 0.9),
            ],
            0.3,
        );
        assert_eq!(m[&7], 0.8);

        let m = match_boxes(&set, &[sb(bb(0.0, 0.0, 10.0, 10.0), 0.55)], 0.3);
        assert_eq!(m[&7], 0.55);

        let m = match_boxes(&set, &[sb(bb(50.0, 50.0, 60.0, 60.0), 0.99)], 0.3);
        assert_eq!(m[&7], 0.0);

        // candidates from another image never match
        let other = ScoredBox {
            image_id: "elsewhere".into(),
            bbox: bb(0.0, 0.0, 10.0, 10.0),
            confidence: 0.7,
        };
        assert_eq!(match_boxes(&set, &[other], 0.3)[&7], 0.0);
        assert_eq!(match_boxes(&set, &[], 0.3)[&7], 0.0);
    }

    #[test]
    fn match_threshold_is_strict_and_ties_take_first() {
        let set = DetectionSet::new(
            vec![det(1, "img", bb(0.0, 0.0, 10.0, 10.0), 0.3)],
            1,
            Role::Train,
        )
        .unwrap();
        // IoU exactly 1/3 against (5,0,15,10)
        let third = ScoredBox {
            image_id: "img".into(),
            bbox: bb(5.0, 0.0, 15.0, 10.0),
            confidence: 0.6,
        };
        assert_eq!(match_boxes(&set, &[third.clone()], 1.0 / 3.0)[&1], 0.0);
        assert_eq!(match_boxes(&set, &[third.clone()], 0.3)[&1], 0.6);

        let mirrored = ScoredBox {
            bbox: bb(-5.0, 0.0, 5.0, 10.0),
            confidence: 0.2,
            ..third.clone()
        };
        assert_eq!(
            match_boxes(&set, &[third.clone(), mirrored.clone()], 0.3)[&1],
            0.6
        );
        assert_eq!(match_boxes(&set, &[mirrored, third], 0.3)[&1], 0.2);
    }

    #[test]
    fn detection_set_validation() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert!(DetectionSet::new(vec![det(0, "i", b, 1.5)], 1, Role::Train).is_err());
        assert!(
            DetectionSet::new(vec![det(0, "i", b, 0.5), det(0, "i", b, 0.5)], 1, Role::Train)
                .is_err()
        );
        assert!(DetectionSet::new(vec![det(0, "i", b, 0.5)], 2, Role::Train).is_err());
    }
}
