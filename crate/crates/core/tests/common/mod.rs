#![allow(dead_code)]

use std::collections::BTreeMap;

use boxrank::metrics::{GroundTruthSet, GtBox};
use boxrank::oracle::{LinearScorer, OracleConfig, ScorerOracle, TrainingBatch};
use boxrank::rerank::LabelSet;
use boxrank::synth::Truth;
use boxrank::{match_boxes, BBox, DetBox, DetectionSet, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bbox(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::from_xywh(x, y, w, h).unwrap()
}

/// Confidences of `set` under a fresh LinearScorer fitted to `labels`.
pub fn retrained_confidences(
    train: &DetectionSet,
    set: &DetectionSet,
    labels: &LabelSet,
    cfg: &OracleConfig,
    iou_min: f64,
) -> BTreeMap<u64, f64> {
    let mut scorer = LinearScorer::new();
    scorer
        .train(0, &TrainingBatch::from_labels(train, labels), cfg)
        .unwrap();
    let re = scorer.rescore(set).unwrap();
    match_boxes(set, &re.boxes, iou_min)
}

pub fn fp_above(
    set: &DetectionSet,
    conf: &BTreeMap<u64, f64>,
    truth: &BTreeMap<u64, Truth>,
    o: f64,
) -> usize {
    set.boxes()
        .iter()
        .filter(|b| truth[&b.box_id] == Truth::Fp && conf[&b.box_id] > o)
        .count()
}

/// A small random evaluation instance: up to `max_boxes` detections and
/// ground-truth boxes spread over a handful of images, some ignored.
pub fn random_instance(r: &mut ChaCha8Rng, max_boxes: usize) -> (DetectionSet, GroundTruthSet) {
    let n_images = r.gen_range(1..=4);
    let image = |r: &mut ChaCha8Rng| format!("i{}", r.gen_range(0..n_images));
    let n_gt = r.gen_range(1..=max_boxes / 2);
    let mut gt = Vec::new();
    for _ in 0..n_gt {
        gt.push(GtBox {
            image_id: image(r),
            bbox: bbox(r.gen_range(0.0..60.0), r.gen_range(0.0..60.0), r.gen_range(5.0..30.0), r.gen_range(5.0..30.0)),
            ignore: r.gen_bool(0.15),
            attributes: BTreeMap::new(),
        });
    }
    if gt.iter().all(|g| g.ignore) {
        gt[0].ignore = false;
    }
    let n_det = r.gen_range(0..=max_boxes - n_gt);
    // coarse confidences so ties occur
    let levels = r.gen_range(3..20);
    let mut dets = Vec::new();
    for id in 0..n_det as u64 {
        let (img, b) = if r.gen_bool(0.5) {
            // near a ground-truth box
            let g = &gt[r.gen_range(0..gt.len())];
            let (x, y) = (g.bbox.x1() + r.gen_range(-4.0..4.0), g.bbox.y1() + r.gen_range(-4.0..4.0));
            let w = (g.bbox.width() + r.gen_range(-4.0..4.0)).max(1.0);
            let h = (g.bbox.height() + r.gen_range(-4.0..4.0)).max(1.0);
            (g.image_id.clone(), bbox(x, y, w, h))
        } else {
            let img = image(r);
            (img, bbox(r.gen_range(0.0..60.0), r.gen_range(0.0..60.0), r.gen_range(5.0..30.0), r.gen_range(5.0..30.0)))
        };
        let conf = r.gen_range(0..=levels) as f64 / levels as f64;
        dets.push(DetBox::new(id, img, b, conf, vec![]));
    }
    let mut images: Vec<String> = (0..n_images).map(|i| format!("i{i}")).collect();
    images.push("empty".into());
    (
        DetectionSet::new(dets, 0, Role::Validation).unwrap(),
        GroundTruthSet::new(images, gt),
    )
}

/// Reference evaluation by threshold enumeration: for every distinct
/// confidence the detections at or above it are matched from scratch.
pub mod brute {
    use super::*;

    fn overlap(a: &BBox, b: &BBox) -> f64 {
        let w = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
        let h = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
        let inter = w * h;
        let area = |x: &BBox| (x.x2() - x.x1()) * (x.y2() - x.y1());
        inter / (area(a) + area(b) - inter)
    }

    /// (true positives, false positives) among detections with confidence
    /// at or above `t`.
    fn counts_at(dets: &DetectionSet, gt: &GroundTruthSet, t: f64, iou_eval: f64) -> (usize, usize) {
        let mut kept: Vec<&DetBox> = dets.boxes().iter().filter(|d| d.confidence >= t).collect();
        kept.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.box_id.cmp(&b.box_id))
        });
        let mut used = vec![false; gt.boxes().len()];
        let (mut tp, mut fp) = (0, 0);
        for d in kept {
            let mut best: Option<usize> = None;
            let mut best_iou = -1.0;
            let mut ignored = false;
            for (j, g) in gt.boxes().iter().enumerate() {
                if g.image_id != d.image_id {
                    continue;
                }
                let o = overlap(&d.bbox, &g.bbox);
                if o < iou_eval {
                    continue;
                }
                if g.ignore {
                    ignored = true;
                } else if !used[j] && o > best_iou {
                    best_iou = o;
                    best = Some(j);
                }
            }
            match best {
                Some(j) => {
                    used[j] = true;
                    tp += 1;
                }
                None if ignored => {}
                None => fp += 1,
            }
        }
        (tp, fp)
    }

    /// (log-average miss rate, average precision).
    pub fn evaluate(dets: &DetectionSet, gt: &GroundTruthSet, iou_eval: f64) -> (f64, f64) {
        let n_gt = gt.boxes().iter().filter(|g| !g.ignore).count() as f64;
        let mut images: Vec<&str> = gt.images().iter().map(String::as_str).collect();
        images.extend(dets.boxes().iter().map(|d| d.image_id.as_str()));
        images.sort();
        images.dedup();
        let n_img = images.len() as f64;

        let mut thresholds: Vec<f64> = dets.boxes().iter().map(|d| d.confidence).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        // (fppi, miss rate, recall, precision) per threshold; thresholds
        // where every kept detection is ignored have undefined precision
        let mut pts = Vec::new();
        for &t in &thresholds {
            let (tp, fp) = counts_at(dets, gt, t, iou_eval);
            if tp + fp == 0 {
                continue;
            }
            let recall = tp as f64 / n_gt;
            pts.push((fp as f64 / n_img, 1.0 - recall, recall, tp as f64 / (tp + fp) as f64));
        }

        let mut log_sum = 0.0;
        for i in 0..9 {
            let reference = 10f64.powf(-2.0 + 0.25 * i as f64);
            let mut mr: f64 = 1.0;
            for p in &pts {
                if p.0 <= reference && p.1 < mr {
                    mr = p.1;
                }
            }
            log_sum += mr.max(1e-6).ln();
        }
        let lamr = (log_sum / 9.0).exp();

        let mut ap = 0.0;
        let mut prev = 0.0;
        let mut recalls: Vec<f64> = pts.iter().map(|p| p.2).collect();
        recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        recalls.dedup();
        for r in recalls {
            let p_interp = pts
                .iter()
                .filter(|p| p.2 >= r)
                .map(|p| p.3)
                .fold(0.0, f64::max);
            ap += (r - prev) * p_interp;
            prev = r;
        }
        (lamr, ap)
    }
}
