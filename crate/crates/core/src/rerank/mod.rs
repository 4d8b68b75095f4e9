//! Box re-ranking: seed selection, promotion of negative clusters into the
//! positive set, box-number counting on the validation split, and the round
//! driver that ties them together.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{match_boxes, nms_indices, DetectionSet, Label};
use crate::clustering::ClusterStats;
use crate::error::{Error, Result};
use crate::oracle::{ModelVersion, OracleConfig, ScorerOracle};

mod driver;

pub use driver::{run_pipeline, Pipeline};

/// Partition of the training boxes into positives, negatives and ignored
/// boxes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub positive: BTreeSet<u64>,
    pub negative: BTreeSet<u64>,
    pub ignored: BTreeSet<u64>,
}

impl LabelSet {
    pub fn label_of(&self, box_id: u64) -> Label {
        if self.positive.contains(&box_id) {
            Label::Positive
        } else if self.negative.contains(&box_id) {
            Label::Negative
        } else if self.ignored.contains(&box_id) {
            Label::Ignored
        } else {
            Label::Unlabeled
        }
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len() + self.ignored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the three parts are disjoint and together cover exactly
    /// `all_ids`.
    pub fn check_partition(&self, all_ids: &BTreeSet<u64>) -> std::result::Result<(), String> {
        if let Some(id) = self.positive.intersection(&self.negative).next() {
            return Err(format!("box {id} is both positive and negative"));
        }
        if let Some(id) = self
            .ignored
            .iter()
            .find(|id| self.positive.contains(id) || self.negative.contains(id))
        {
            return Err(format!("ignored box {id} is also labeled"));
        }
        if self.len() != all_ids.len() {
            return Err(format!(
                "label set covers {} boxes, training set has {}",
                self.len(),
                all_ids.len()
            ));
        }
        for id in self.positive.iter().chain(&self.negative).chain(&self.ignored) {
            if !all_ids.contains(id) {
                return Err(format!("labeled box {id} is not in the training set"));
            }
        }
        Ok(())
    }
}

/// Re-ranking granularity. Only `Cluster` is the real method; `Instance`
/// exists for ablation comparisons.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Cluster,
    /// Seeds are single boxes above `h`; each round promotes the
    /// `top_k_boxes` highest-scoring negative boxes.
    Instance { top_k_boxes: usize },
}

/// Which round to keep when the round budget runs out before alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxRoundsPolicy {
    /// The round whose validation count came closest to the baseline.
    #[default]
    ClosestToAlignment,
    LastRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seed threshold on cluster-averaged confidence.
    pub h: f64,
    /// Output threshold used for box counting.
    pub o: f64,
    /// Minimum IoU (exclusive) for matching re-predicted boxes.
    pub iou_min: f64,
    pub k: usize,
    /// Only boxes above this confidence are clustered.
    pub conf_floor: f64,
    pub top_k_clusters: usize,
    pub max_rounds: usize,
    pub nms_iou: f64,
    pub rng_seed: u64,
    pub l2_normalize: bool,
    /// Stop at the first round whose validation count reaches the baseline.
    pub stop_on_alignment: bool,
    pub max_rounds_policy: MaxRoundsPolicy,
    pub granularity: Granularity,
    pub oracle: OracleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            h: 0.95,
            o: 0.4,
            iou_min: 0.3,
            k: 100,
            conf_floor: 0.1,
            top_k_clusters: 3,
            max_rounds: 30,
            nms_iou: 0.5,
            rng_seed: 0,
            l2_normalize: false,
            stop_on_alignment: true,
            max_rounds_policy: MaxRoundsPolicy::ClosestToAlignment,
            granularity: Granularity::Cluster,
            oracle: OracleConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0 < self.o && self.o < self.h && self.h < 1.0) {
            return bad(format!(
                "thresholds must satisfy 0 < o < h < 1 (o = {}, h = {})",
                self.o, self.h
            ));
        }
        if !(self.iou_min > 0.0 && self.iou_min < 1.0) {
            return bad(format!("iou_min must be in (0, 1), got {}", self.iou_min));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou must be in (0, 1], got {}", self.nms_iou));
        }
        if !(0.0..1.0).contains(&self.conf_floor) {
            return bad(format!("conf_floor must be in [0, 1), got {}", self.conf_floor));
        }
        if self.k < 1 {
            return bad("k must be >= 1".into());
        }
        if self.top_k_clusters < 1 {
            return bad("top_k_clusters must be >= 1".into());
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be >= 1".into());
        }
        if let Granularity::Instance { top_k_boxes: 0 } = self.granularity {
            return bad("top_k_boxes must be >= 1".into());
        }
        self.oracle.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// The validation box count reached the source model's count.
    #[serde(rename = "bna")]
    Alignment,
    MaxRounds,
    NegativesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub version: ModelVersion,
    /// Validation boxes above `o` after NMS for this round's model.
    pub val_count: usize,
    /// Clusters (or, at instance granularity, boxes) promoted this round.
    pub promoted: Vec<u64>,
    pub labels: LabelSet,
}

/// Confidences of every box under the selected model, after matching.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalConfidences {
    pub train: std::collections::BTreeMap<u64, f64>,
    pub val: std::collections::BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Last completed round.
    pub round: usize,
    pub labels: LabelSet,
    /// Source-model validation count the re-ranked model must reach.
    pub baseline: usize,
    pub history: Vec<RoundRecord>,
    pub terminated: Option<TerminationReason>,
    /// Round whose model is returned, set on termination.
    pub selected_round: Option<usize>,
    pub final_confidences: Option<FinalConfidences>,
}

impl PipelineState {
    pub fn val_counts(&self) -> Vec<usize> {
        self.history.iter().map(|r| r.val_count).collect()
    }

    pub fn selected(&self) -> Option<&RoundRecord> {
        self.selected_round.and_then(|r| self.history.get(r))
    }

    /// Promotions in round order, round 0 excluded.
    pub fn promotion_log(&self) -> Vec<(usize, Vec<u64>)> {
        self.history
            .iter()
            .skip(1)
            .map(|r| (r.round, r.promoted.clone()))
            .collect()
    }
}

/// Initial labels: members of clusters whose mean confidence is strictly
/// above `h` are positive, other clustered boxes and every unclustered box
/// of `boxes` are negative, and cluster outliers are ignored.
pub fn select_seeds(stats: &[ClusterStats], h: f64, boxes: &DetectionSet) -> Result<LabelSet> {
    let mut labels = LabelSet::default();
    let mut any_seed = false;
    for s in stats.iter().filter(|s| s.member_count > 0) {
        let seed = s.mean_confidence > h;
        any_seed |= seed;
        for &id in &s.members {
            if s.outliers.binary_search(&id).is_ok() {
                labels.ignored.insert(id);
            } else if seed {
                labels.positive.insert(id);
            } else {
                labels.negative.insert(id);
            }
        }
    }
    if !any_seed {
        return Err(Error::NoSeedClusters { h });
    }
    for b in boxes.boxes() {
        if labels.label_of(b.box_id) == Label::Unlabeled {
            labels.negative.insert(b.box_id);
        }
    }
    Ok(labels)
}

/// Instance-level seeds: every box above `h` on its own confidence.
pub fn select_instance_seeds(boxes: &DetectionSet, h: f64) -> Result<LabelSet> {
    let mut labels = LabelSet::default();
    for b in boxes.boxes() {
        if b.confidence > h {
            labels.positive.insert(b.box_id);
        } else {
            labels.negative.insert(b.box_id);
        }
    }
    if labels.positive.is_empty() {
        return Err(Error::NoSeedClusters { h });
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Promotion {
    pub labels: LabelSet,
    pub promoted: Vec<usize>,
}

/// Moves the non-ignored members of the `top_k` highest-scoring fully
/// negative clusters into the positive set. `stats` must carry the updated
/// confidences. Ties in mean confidence go to the lower cluster index.
pub fn promote_clusters(labels: &LabelSet, stats: &[ClusterStats], top_k: usize) -> Result<Promotion> {
    let mut candidates: Vec<&ClusterStats> = stats
        .iter()
        .filter(|s| {
            s.member_count > 0
                && s.members.iter().any(|id| labels.negative.contains(id))
                && s
                    .members
                    .iter()
                    .all(|id| labels.negative.contains(id) || labels.ignored.contains(id))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NegativesExhausted);
    }
    candidates.sort_by(|a, b| {
        b.mean_confidence
            .total_cmp(&a.mean_confidence)
            .then(a.index.cmp(&b.index))
    });

    let mut next = labels.clone();
    let mut promoted = Vec::new();
    for s in candidates.into_iter().take(top_k) {
        for id in &s.members {
            if next.negative.remove(id) {
                next.positive.insert(*id);
            }
        }
        promoted.push(s.index);
    }
    Ok(Promotion {
        labels: next,
        promoted,
    })
}

/// Instance-level promotion over negative boxes above the clustering floor.
pub fn promote_instances(
    labels: &LabelSet,
    boxes: &DetectionSet,
    updated: &std::collections::BTreeMap<u64, f64>,
    eligible: &BTreeSet<u64>,
    top_k: usize,
) -> Result<(LabelSet, Vec<u64>)> {
    let mut candidates: Vec<(u64, f64)> = boxes
        .boxes()
        .iter()
        .filter(|b| labels.negative.contains(&b.box_id) && eligible.contains(&b.box_id))
        .map(|b| (b.box_id, updated.get(&b.box_id).copied().unwrap_or(0.0)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NegativesExhausted);
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut next = labels.clone();
    let promoted: Vec<u64> = candidates.iter().take(top_k).map(|c| c.0).collect();
    for id in &promoted {
        next.negative.remove(id);
        next.positive.insert(*id);
    }
    Ok((next, promoted))
}

/// Number of validation boxes above `o` after re-prediction, matching to the
/// initial validation boxes, and per-image NMS.
pub fn count_boxes<O: ScorerOracle + ?Sized>(
    oracle: &mut O,
    val: &DetectionSet,
    o: f64,
    nms_iou: f64,
    iou_min: f64,
) -> Result<usize> {
    if val.is_empty() {
        return Ok(0);
    }
    let repredicted = oracle.rescore(val)?;
    let updated = val.with_confidences(&match_boxes(val, &repredicted.boxes, iou_min));
    Ok(nms_indices(updated.boxes(), nms_iou)
        .into_iter()
        .filter(|&i| updated.boxes()[i].confidence > o)
        .count())
}
