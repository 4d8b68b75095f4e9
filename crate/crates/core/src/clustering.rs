//! Feature-space packing of boxes.
//!
//! Boxes above a confidence floor are clustered once with Lloyd's k-means
//! (k-means++ seeding) on their feature vectors. Re-ranking then operates on
//! whole clusters: a cluster's confidence is the plain mean over its members,
//! and members lying unusually far from their centroid are flagged so they
//! can be left out of scorer training.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{DetBox, DetectionSet};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;

/// Members of clusters smaller than this are never outliers.
pub const MIN_OUTLIER_CLUSTER: usize = 4;

/// Outlier cut in standard deviations of the within-cluster distances.
pub const OUTLIER_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub conf_floor: f64,
    pub rng_seed: u64,
    pub max_iter: usize,
    /// Scale each feature vector to unit length before clustering.
    pub l2_normalize: bool,
}

impl KMeansConfig {
    pub fn new(k: usize, conf_floor: f64, rng_seed: u64) -> Self {
        KMeansConfig {
            k,
            conf_floor,
            rng_seed,
            max_iter: DEFAULT_MAX_ITER,
            l2_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// box id -> cluster index; boxes at or below the floor are absent.
    pub assignments: BTreeMap<u64, usize>,
    /// Sum of squared distances of members to their centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub l2_normalized: bool,
}

/// Per-cluster summary used for seeding and promotion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub index: usize,
    pub member_count: usize,
    /// Mean member confidence, outliers included. Zero for empty clusters.
    pub mean_confidence: f64,
    pub members: Vec<u64>,
    pub outliers: Vec<u64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn prepared(b: &DetBox, normalize: bool) -> Vec<f64> {
    if !normalize {
        return b.feature.clone();
    }
    let norm = b.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        b.feature.iter().map(|v| v / norm).collect()
    } else {
        b.feature.clone()
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(n - 1);
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn inertia_of(points: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Clusters the boxes with confidence strictly above `conf_floor`.
pub fn cluster_boxes(
    boxes: &DetectionSet,
    k: usize,
    conf_floor: f64,
    rng_seed: u64,
) -> Result<Clustering> {
    cluster_boxes_with(boxes, &KMeansConfig::new(k, conf_floor, rng_seed))
}

pub fn cluster_boxes_with(boxes: &DetectionSet, cfg: &KMeansConfig) -> Result<Clustering> {
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if boxes.feature_dim() == 0 {
        return Err(Error::InvalidConfig(
            "clustering needs a feature dimension of at least 1".into(),
        ));
    }
    let eligible: Vec<&DetBox> = boxes
        .boxes()
        .iter()
        .filter(|b| b.confidence > cfg.conf_floor)
        .collect();
    if eligible.len() < cfg.k {
        return Err(Error::FewerBoxesThanClusters {
            eligible: eligible.len(),
            k: cfg.k,
        });
    }

    let points: Vec<Vec<f64>> = eligible
        .iter()
        .map(|b| prepared(b, cfg.l2_normalize))
        .collect();
    let n = points.len();
    let dim = boxes.feature_dim();
    let k = cfg.k;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut trace: Vec<f64> = Vec::new();
    let mut reseeded_last = false;
    let mut iterations = 0;

    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        if !changed && !reseeded_last {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s * inv).collect();
            }
        }

        // Empty clusters take the point farthest from its own centroid,
        // unless this is the last allowed iteration.
        reseeded_last = false;
        if iter + 1 < cfg.max_iter {
            for j in 0..k {
                if counts[j] > 0 {
                    continue;
                }
                let far = (0..n)
                    .map(|i| (i, sq_dist(&points[i], &centroids[assign[i]])))
                    .filter(|&(i, d)| d > 0.0 && counts[assign[i]] > 1)
                    .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((i, d)),
                    });
                if let Some((i, _)) = far {
                    counts[assign[i]] -= 1;
                    centroids[j] = points[i].clone();
                    assign[i] = j;
                    counts[j] = 1;
                    reseeded_last = true;
                }
            }
        }

        let inertia = inertia_of(&points, &assign, &centroids);
        if let Some(&prev) = trace.last() {
            debug_assert!(
                inertia <= prev + 1e-9 * prev.abs().max(1.0),
                "k-means inertia increased: {prev} -> {inertia}"
            );
        }
        trace.push(inertia);
    }

    let assignments = eligible
        .iter()
        .zip(&assign)
        .map(|(b, &a)| (b.box_id, a))
        .collect();
    let inertia = inertia_of(&points, &assign, &centroids);
    log::debug!("k-means: k={k} n={n} iterations={iterations} inertia={inertia:.6}");

    Ok(Clustering {
        k,
        centroids,
        assignments,
        inertia,
        iterations,
        inertia_trace: trace,
        l2_normalized: cfg.l2_normalize,
    })
}

impl Clustering {
    pub fn cluster_of(&self, box_id: u64) -> Option<usize> {
        self.assignments.get(&box_id).copied()
    }

    /// Member box ids per cluster index, ascending.
    pub fn members(&self) -> Vec<Vec<u64>> {
        let mut out = vec![Vec::new(); self.k];
        for (&id, &c) in &self.assignments {
            out[c].push(id);
        }
        out
    }

    /// Objective recomputed from the centroids, the assignments and the
    /// features in `boxes`.
    pub fn recompute_inertia(&self, boxes: &DetectionSet) -> f64 {
        boxes
            .boxes()
            .iter()
            .filter_map(|b| {
                let c = self.cluster_of(b.box_id)?;
                Some(sq_dist(&prepared(b, self.l2_normalized), &self.centroids[c]))
            })
            .sum()
    }

    /// Structural checks; returns the first violated invariant.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.centroids.len() != self.k {
            return Err(format!(
                "{} centroids for k = {}",
                self.centroids.len(),
                self.k
            ));
        }
        if let Some(first) = self.centroids.first() {
            if self.centroids.iter().any(|c| c.len() != first.len()) {
                return Err("centroids differ in dimension".into());
            }
        }
        if let Some((id, c)) = self.assignments.iter().find(|(_, &c)| c >= self.k) {
            return Err(format!("box {id} assigned to cluster {c} >= k"));
        }
        if !(self.inertia.is_finite() && self.inertia >= 0.0) {
            return Err(format!("inertia {} is not a finite non-negative", self.inertia));
        }
        Ok(())
    }
}

/// Ids of boxes whose feature distance to their centroid exceeds the mean
/// plus two standard deviations of their cluster's distances. Clusters with
/// fewer than four members never contain outliers.
pub fn flag_outliers(clustering: &Clustering, boxes: &DetectionSet) -> BTreeSet<u64> {
    let mut dists: Vec<Vec<(u64, f64)>> = vec![Vec::new(); clustering.k];
    for b in boxes.boxes() {
        if let Some(c) = clustering.cluster_of(b.box_id) {
            let d = sq_dist(
                &prepared(b, clustering.l2_normalized),
                &clustering.centroids[c],
            )
            .sqrt();
            dists[c].push((b.box_id, d));
        }
    }

    let mut out = BTreeSet::new();
    for members in dists.iter().filter(|m| m.len() >= MIN_OUTLIER_CLUSTER) {
        let n = members.len() as f64;
        let mean = members.iter().map(|(_, d)| d).sum::<f64>() / n;
        let var = members.iter().map(|(_, d)| (d - mean).powi(2)).sum::<f64>() / n;
        let cut = mean + OUTLIER_SIGMAS * var.sqrt();
        out.extend(members.iter().filter(|(_, d)| *d > cut).map(|(id, _)| *id));
    }
    out
}

/// Summary of every cluster index in `0..k`, using the confidences carried by
/// `boxes`.
pub fn cluster_stats(clustering: &Clustering, boxes: &DetectionSet) -> Vec<ClusterStats> {
    let outliers = flag_outliers(clustering, boxes);
    let mut stats: Vec<ClusterStats> = (0..clustering.k)
        .map(|index| ClusterStats {
            index,
            member_count: 0,
            mean_confidence: 0.0,
            members: Vec::new(),
            outliers: Vec::new(),
        })
        .collect();

    let mut sums = vec![0.0; clustering.k];
    for b in boxes.boxes() {
        if let Some(c) = clustering.cluster_of(b.box_id) {
            let s = &mut stats[c];
            s.member_count += 1;
            s.members.push(b.box_id);
            if outliers.contains(&b.box_id) {
                s.outliers.push(b.box_id);
            }
            sums[c] += b.confidence;
        }
    }
    for (s, sum) in stats.iter_mut().zip(sums) {
        s.members.sort_unstable();
        s.outliers.sort_unstable();
        if s.member_count > 0 {
            s.mean_confidence = sum / s.member_count as f64;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::{BBox, Role};

    fn set_from(features: &[Vec<f64>], confs: &[f64]) -> DetectionSet {
        let boxes = features
            .iter()
            .zip(confs)
            .enumerate()
            .map(|(i, (f, &c))| {
                DetBox::new(
                    i as u64,
                    "img",
                    BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    c,
                    f.clone(),
                )
            })
            .collect();
        DetectionSet::new(boxes, features[0].len(), Role::Train).unwrap()
    }

    #[test]
    fn two_separated_groups() {
        let set = set_from(
            &[
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![10.0, 10.0],
                vec![10.0, 11.0],
            ],
            &[0.9; 4],
        );
        let c = cluster_boxes(&set, 2, 0.1, 7).unwrap();
        assert_eq!(c.cluster_of(0), c.cluster_of(1));
        assert_eq!(c.cluster_of(2), c.cluster_of(3));
        assert_ne!(c.cluster_of(0), c.cluster_of(2));
        assert!((c.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let set = set_from(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]], &[0.5; 3]);
        let c = cluster_boxes(&set, 1, 0.1, 0).unwrap();
        assert_eq!(c.assignments.len(), 3);
        assert!((c.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((c.centroids[0][1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn floor_excludes_low_confidence_and_counts_eligible() {
        let set = set_from(
            &[vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            &[0.9, 0.1, 0.05, 0.5],
        );
        let c = cluster_boxes(&set, 2, 0.1, 0).unwrap();
        assert_eq!(c.assignments.keys().copied().collect::<Vec<_>>(), vec![0, 3]);
        match cluster_boxes(&set, 3, 0.1, 0) {
            Err(Error::FewerBoxesThanClusters { eligible: 2, k: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_points_leave_clusters_empty_without_panicking() {
        let set = set_from(&[vec![1.0], vec![1.0], vec![1.0]], &[0.9; 3]);
        let c = cluster_boxes(&set, 3, 0.1, 3).unwrap();
        assert_eq!(c.inertia, 0.0);
        let stats = cluster_stats(&c, &set);
        assert_eq!(stats.len(), 3);
        assert_eq!(stats.iter().map(|s| s.member_count).sum::<usize>(), 3);
    }

    #[test]
    fn stats_means() {
        let set = set_from(&[vec![0.0], vec![0.1], vec![0.2], vec![50.0]], &[0.9, 0.8, 1.0, 0.4]);
        let c = cluster_boxes(&set, 2, 0.1, 1).unwrap();
        let stats = cluster_stats(&c, &set);
        let big = &stats[c.cluster_of(0).unwrap()];
        assert_eq!(big.member_count, 3);
        assert!((big.mean_confidence - 0.9).abs() < 1e-12);
        assert!(big.outliers.is_empty());
        let single = &stats[c.cluster_of(3).unwrap()];
        assert_eq!(single.members, vec![3]);
        assert!((single.mean_confidence - 0.4).abs() < 1e-12);
        assert!(single.outliers.is_empty());
    }

    fn manual(assign: &[(u64, usize)], centroids: Vec<Vec<f64>>) -> Clustering {
        Clustering {
            k: centroids.len(),
            centroids,
            assignments: assign.iter().copied().collect(),
            inertia: 0.0,
            iterations: 0,
            inertia_trace: vec![],
            l2_normalized: false,
        }
    }

    #[test]
    fn equidistant_members_are_not_outliers() {
        let feats = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let set = set_from(&feats, &[0.9; 4]);
        let c = manual(&[(0, 0), (1, 0), (2, 0), (3, 0)], vec![vec![0.0, 0.0]]);
        assert!(flag_outliers(&c, &set).is_empty());
    }

    #[test]
    fn small_clusters_have_no_outliers() {
        let feats = vec![vec![0.0], vec![0.1], vec![100.0]];
        let set = set_from(&feats, &[0.9; 3]);
        let c = manual(&[(0, 0), (1, 0), (2, 0)], vec![vec![0.0]]);
        assert!(flag_outliers(&c, &set).is_empty());
    }

    #[test]
    fn far_member_flagged() {
        // 20 members at distance 1 around the origin in 2-d, one at 8.
        let mut feats: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 20.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
        feats.push(vec![8.0, 0.0]);
        let set = set_from(&feats, &[0.9; 21]);
        let assign: Vec<(u64, usize)> = (0..21).map(|i| (i, 0)).collect();
        let c = manual(&assign, vec![vec![0.0, 0.0]]);

        // direct: mean = 28/21, sd = sqrt((20 (1-m)^2 + (8-m)^2) / 21)
        let m = 28.0 / 21.0;
        let sd = ((20.0 * (1.0 - m) * (1.0f64 - m) + (8.0 - m) * (8.0 - m)) / 21.0).sqrt();
        assert!(8.0 > m + 2.0 * sd && 1.0 < m + 2.0 * sd);

        let flagged = flag_outliers(&c, &set);
        assert_eq!(flagged.into_iter().collect::<Vec<_>>(), vec![20]);
        let stats = cluster_stats(&c, &set);
        assert_eq!(stats[0].outliers, vec![20]);
        assert!((stats[0].mean_confidence - 0.9).abs() < 1e-12);
    }

    #[test]
    fn normalization_flag_changes_geometry() {
        let set = set_from(
            &[vec![1.0, 0.0], vec![10.0, 0.0], vec![0.0, 1.0], vec![0.0, 10.0]],
            &[0.9; 4],
        );
        let cfg = KMeansConfig {
            l2_normalize: true,
            ..KMeansConfig::new(2, 0.1, 5)
        };
        let c = cluster_boxes_with(&set, &cfg).unwrap();
        assert_eq!(c.cluster_of(0), c.cluster_of(1));
        assert_eq!(c.cluster_of(2), c.cluster_of(3));
        assert!(c.inertia < 1e-12);
    }
}
