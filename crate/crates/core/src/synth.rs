//! Synthetic detection scenarios with known true/false positive labels.
//!
//! Each class is a Gaussian blob in feature space with a Beta-shaped
//! confidence distribution. A `fn_fraction` share of every true-positive class
//! becomes hard instances: smaller boxes, low confidence, and features shifted
//! by `fn_offset`. Boxes are scattered over images so that no two boxes in an
//! image overlap at IoU `max_overlap` or more, and images are split 80/20 into
//! train and validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, BBox, DetBox, DetectionSet, Role};
use crate::error::{Error, Result};
use crate::metrics::{GroundTruthSet, GtBox};

/// Placement attempts per box before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Tp,
    Fp,
}

/// `lo + (hi - lo) * Beta(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSpec {
    pub alpha: f64,
    pub beta: f64,
    pub lo: f64,
    pub hi: f64,
}

impl BetaSpec {
    pub fn new(alpha: f64, beta: f64, lo: f64, hi: f64) -> Self {
        BetaSpec { alpha, beta, lo, hi }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidScenario(format!("{what}: beta parameters must be > 0")));
        }
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::InvalidScenario(format!(
                "{what}: need 0 <= lo < hi <= 1, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sampler(&self) -> Beta<f64> {
        Beta::new(self.alpha, self.beta).expect("validated parameters")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub truth: Truth,
    pub count: usize,
    pub center: Vec<f64>,
    pub stddev: f64,
    pub confidence: BetaSpec,
    /// Box height range in pixels, sampled uniformly.
    pub height: (f64, f64),
    /// Width over height.
    pub aspect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_images: usize,
    pub image_size: (f64, f64),
    pub feature_dim: usize,
    pub classes: Vec<ClassSpec>,
    /// Share of each true-positive class generated as hard, low-confidence
    /// instances.
    pub fn_fraction: f64,
    pub fn_confidence: BetaSpec,
    pub fn_height: (f64, f64),
    /// Feature shift of hard instances relative to their class center.
    pub fn_offset: Vec<f64>,
    /// Share of false positives whose confidence is drawn from the first
    /// true-positive class instead of their own.
    pub confidence_noise: f64,
    pub val_fraction: f64,
    /// Boxes within an image never overlap at this IoU or above.
    pub max_overlap: f64,
    pub rng_seed: u64,
}

impl Default for ScenarioSpec {
    /// 1000 true and 500 false positives over 200 images, centers 6 standard
    /// deviations apart, a quarter of the true positives hard.
    fn default() -> Self {
        let d = 16;
        let axis = |i: usize, v: f64| {
            let mut c = vec![0.0; d];
            c[i] = v;
            c
        };
        ScenarioSpec {
            n_images: 200,
            image_size: (640.0, 480.0),
            feature_dim: d,
            classes: vec![
                ClassSpec {
                    truth: Truth::Tp,
                    count: 1000,
                    center: vec![0.0; d],
                    stddev: 1.0,
                    confidence: BetaSpec::new(8.0, 1.0, 0.9, 1.0),
                    height: (60.0, 120.0),
                    aspect: 0.41,
                },
                ClassSpec {
                    truth: Truth::Fp,
                    count: 500,
                    center: axis(0, 6.0),
                    stddev: 1.0,
                    confidence: BetaSpec::new(2.5, 5.0, 0.1, 0.9),
                    height: (30.0, 120.0),
                    aspect: 0.41,
                },
            ],
            fn_fraction: 0.25,
            fn_confidence: BetaSpec::new(2.0, 5.0, 0.1, 0.4),
            fn_height: (25.0, 50.0),
            fn_offset: axis(1, 4.0),
            confidence_noise: 0.0,
            val_fraction: 0.2,
            max_overlap: 0.3,
            rng_seed: 42,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if !self.classes.iter().any(|c| c.truth == Truth::Tp)
            || !self.classes.iter().any(|c| c.truth == Truth::Fp)
        {
            return bad("need at least one TP and one FP class".into());
        }
        if !(0.0..=1.0).contains(&self.fn_fraction) {
            return bad(format!("fn_fraction {} outside [0, 1]", self.fn_fraction));
        }
        if !(0.0..=1.0).contains(&self.confidence_noise) {
            return bad(format!("confidence_noise {} outside [0, 1]", self.confidence_noise));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        let n_val = self.n_val_images();
        if n_val == 0 || n_val >= self.n_images {
            return bad(format!(
                "{} images cannot be split into non-empty train and validation parts",
                self.n_images
            ));
        }
        if !(self.max_overlap > 0.0 && self.max_overlap <= 1.0) {
            return bad(format!("max_overlap {} outside (0, 1]", self.max_overlap));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return bad("image size must be positive".into());
        }
        if self.fn_offset.len() != self.feature_dim {
            return bad("fn_offset length differs from feature_dim".into());
        }
        self.fn_confidence.validate("fn_confidence")?;
        self.check_heights("fn_height", self.fn_height, 1.0)?;
        for (i, c) in self.classes.iter().enumerate() {
            if c.center.len() != self.feature_dim {
                return bad(format!("class {i}: center length differs from feature_dim"));
            }
            if !(c.stddev > 0.0 && c.stddev.is_finite()) {
                return bad(format!("class {i}: stddev must be > 0"));
            }
            if !(c.aspect > 0.0) {
                return bad(format!("class {i}: aspect must be > 0"));
            }
            c.confidence.validate(&format!("class {i} confidence"))?;
            self.check_heights(&format!("class {i} height"), c.height, c.aspect)?;
        }
        Ok(())
    }

    fn check_heights(&self, what: &str, (lo, hi): (f64, f64), aspect: f64) -> Result<()> {
        if !(lo > 0.0 && lo <= hi && hi <= self.image_size.1 && hi * aspect <= self.image_size.0) {
            return Err(Error::InvalidScenario(format!(
                "{what}: range [{lo}, {hi}] does not fit the image"
            )));
        }
        Ok(())
    }

    fn n_val_images(&self) -> usize {
        (self.n_images as f64 * self.val_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub train: DetectionSet,
    pub val: DetectionSet,
    /// Ground truth for every image of both splits. Boxes carry a `height`
    /// attribute.
    pub ground_truth: GroundTruthSet,
    pub truth_labels: BTreeMap<u64, Truth>,
    pub train_images: Vec<String>,
    pub val_images: Vec<String>,
}

impl Scenario {
    /// Ground truth restricted to the images of one split.
    pub fn split_ground_truth(&self, role: Role) -> GroundTruthSet {
        let images = match role {
            Role::Train => &self.train_images,
            Role::Validation => &self.val_images,
        };
        self.ground_truth.subset(images.iter().map(String::as_str))
    }
}

struct Drawn {
    truth: Truth,
    class: usize,
    index: usize,
    height: f64,
    aspect: f64,
    confidence: f64,
    feature: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let fn_beta = spec.fn_confidence.sampler();
    let tp_high = spec
        .classes
        .iter()
        .find(|c| c.truth == Truth::Tp)
        .expect("validated")
        .confidence;

    let mut drawn = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let beta = class.confidence.sampler();
        let noise_beta = tp_high.sampler();
        let n_hard = match class.truth {
            Truth::Tp => (class.count as f64 * spec.fn_fraction).round() as usize,
            Truth::Fp => 0,
        };
        let n_noisy = match class.truth {
            Truth::Fp => (class.count as f64 * spec.confidence_noise).round() as usize,
            Truth::Tp => 0,
        };
        for i in 0..class.count {
            let hard = i < n_hard;
            let (cs, b, height) = if hard {
                (spec.fn_confidence, &fn_beta, uniform(&mut rng, spec.fn_height))
            } else if i < n_noisy {
                (tp_high, &noise_beta, uniform(&mut rng, class.height))
            } else {
                (class.confidence, &beta, uniform(&mut rng, class.height))
            };
            let confidence = (cs.lo + (cs.hi - cs.lo) * b.sample(&mut rng)).clamp(0.0, 1.0);
            let feature = (0..spec.feature_dim)
                .map(|j| {
                    let shift = if hard { spec.fn_offset[j] } else { 0.0 };
                    class.center[j] + shift + class.stddev * normal.sample(&mut rng)
                })
                .collect();
            drawn.push(Drawn {
                truth: class.truth,
                class: ci,
                index: i,
                height,
                aspect: class.aspect,
                confidence,
                feature,
            });
        }
    }
    drawn.shuffle(&mut rng);

    // placement
    let (img_w, img_h) = spec.image_size;
    let mut placed: Vec<Vec<BBox>> = vec![Vec::new(); spec.n_images];
    let mut located = Vec::with_capacity(drawn.len());
    for d in &drawn {
        let w = d.height * d.aspect;
        let mut spot = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let img = rng.gen_range(0..spec.n_images);
            let x = rng.gen_range(0.0..=(img_w - w));
            let y = rng.gen_range(0.0..=(img_h - d.height));
            let bbox = BBox::from_xywh(x, y, w, d.height)?;
            if placed[img].iter().all(|o| iou(o, &bbox) < spec.max_overlap) {
                placed[img].push(bbox);
                spot = Some((img, bbox));
                break;
            }
        }
        let Some(spot) = spot else {
            return Err(Error::InfeasiblePlacement {
                class: d.class,
                index: d.index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        };
        located.push(spot);
    }

    let width = spec.n_images.to_string().len().max(4);
    let image_name = |i: usize| format!("img{i:0width$}");
    let mut order: Vec<usize> = (0..spec.n_images).collect();
    order.shuffle(&mut rng);
    let val_images: Vec<bool> = {
        let mut v = vec![false; spec.n_images];
        for &i in &order[..spec.n_val_images()] {
            v[i] = true;
        }
        v
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut gt = Vec::new();
    let mut truth_labels = BTreeMap::new();
    for (id, (d, (img, bbox))) in drawn.into_iter().zip(located).enumerate() {
        let id = id as u64;
        let image_id = image_name(img);
        if d.truth == Truth::Tp {
            gt.push(GtBox {
                image_id: image_id.clone(),
                bbox,
                ignore: false,
                attributes: BTreeMap::from([("height".to_string(), bbox.height())]),
            });
        }
        truth_labels.insert(id, d.truth);
        let b = DetBox::new(id, image_id, bbox, d.confidence, d.feature);
        if val_images[img] {
            val.push(b);
        } else {
            train.push(b);
        }
    }
    gt.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let images: Vec<String> = (0..spec.n_images).map(image_name).collect();
    let mut val_names = Vec::new();
    let mut train_names = Vec::new();
    for (name, &is_val) in images.iter().zip(&val_images) {
        if is_val {
            val_names.push(name.clone());
        } else {
            train_names.push(name.clone());
        }
    }

    let scenario = Scenario {
        train: DetectionSet::new(train, spec.feature_dim, Role::Train)?.with_source("synth"),
        val: DetectionSet::new(val, spec.feature_dim, Role::Validation)?.with_source("synth"),
        ground_truth: GroundTruthSet::new(images, gt),
        truth_labels,
        train_images: train_names,
        val_images: val_names,
    };
    if spec.fn_fraction > 0.0 {
        let all = scenario.train.boxes().iter().chain(scenario.val.boxes());
        let max_fp = all
            .clone()
            .filter(|b| scenario.truth_labels[&b.box_id] == Truth::Fp)
            .map(|b| b.confidence)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_hard = all
            .filter(|b| scenario.truth_labels[&b.box_id] == Truth::Tp)
            .map(|b| b.confidence)
            .fold(f64::INFINITY, f64::min);
        if !(max_fp > min_hard) {
            return Err(Error::InvalidScenario(
                "no false positive outranks a true positive; nothing to re-rank".into(),
            ));
        }
    }
    Ok(scenario)
}

/// Pairs (false positive, true positive below `o`) in which the false
/// positive has the strictly higher confidence. Boxes missing from `truth`
/// are skipped.
pub fn count_inversions(
    confidences: &BTreeMap<u64, f64>,
    initial: &DetectionSet,
    truth: &BTreeMap<u64, Truth>,
    o: f64,
) -> usize {
    // a true positive is a false negative by its initial confidence
    let mut fp = Vec::new();
    let mut fns = Vec::new();
    for b in initial.boxes() {
        let c = confidences.get(&b.box_id).copied().unwrap_or(b.confidence);
        match truth.get(&b.box_id) {
            Some(Truth::Fp) => fp.push(c),
            Some(Truth::Tp) if b.confidence < o => fns.push(c),
            _ => {}
        }
    }
    fns.sort_by(f64::total_cmp);
    fp.iter()
        .map(|&c| fns.partition_point(|&t| t < c))
        .sum()
}
