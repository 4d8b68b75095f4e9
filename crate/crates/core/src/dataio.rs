//! On-disk formats.
//!
//! Detection dumps and ground-truth files are line-delimited JSON: a header
//! object on the first line, then one object per box. Line numbers in errors
//! are 1-based and count the header.
//!
//! ```text
//! {"feature_dim":16,"source":"ssd-caltech","role":"train"}
//! {"box_id":0,"image_id":"set00_v000_0001","bbox":[10,20,40,90],"confidence":0.93,"feature":[...]}
//! ```
//!
//! A run directory holds one `round-NNNN.json` per completed round and a
//! `manifest.json` naming the latest one. Both are replaced atomically.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxgeom::{BBox, DetBox, DetectionSet, Label, Role};
use crate::clustering::{ClusterStats, Clustering};
use crate::error::{Error, Result};
use crate::metrics::{GroundTruthSet, GtBox};
use crate::rerank::{PipelineConfig, PipelineState};
use crate::synth::Truth;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    box_id: u64,
    image_id: String,
    bbox: BBox,
    confidence: f64,
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<usize>,
    #[serde(default, skip_serializing_if = "is_unlabeled")]
    label: Label,
}

fn is_unlabeled(l: &Label) -> bool {
    *l == Label::Unlabeled
}

/// Non-blank lines with their 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents` to a sibling temp file, syncs it, then renames it over
/// `path`.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(text: &str) -> Result<DetectionSet> {
    let mut lines = numbered_lines(text);
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| Error::Schema("detection dump is empty (no header line)".into()))?;
    let header: DumpHeader = serde_json::from_str(htext)
        .map_err(|e| Error::Schema(format!("line {hline}: bad header: {e}")))?;

    let mut boxes = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines {
        let rec: BoxRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(n, e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(Error::parse(
                n,
                format!("confidence {} outside [0, 1]", rec.confidence),
            ));
        }
        if rec.feature.len() != header.feature_dim {
            return Err(Error::parse(
                n,
                format!(
                    "feature length {} does not match header feature_dim {}",
                    rec.feature.len(),
                    header.feature_dim
                ),
            ));
        }
        if !seen.insert(rec.box_id) {
            return Err(Error::parse(n, format!("duplicate box_id {}", rec.box_id)));
        }
        let mut b = DetBox::new(rec.box_id, rec.image_id, rec.bbox, rec.confidence, rec.feature);
        b.cluster_id = rec.cluster_id;
        b.label = rec.label;
        boxes.push(b);
    }
    let set = DetectionSet::new(boxes, header.feature_dim, header.role)?;
    Ok(match header.source {
        Some(s) => set.with_source(s),
        None => set,
    })
}

pub fn load_detections(path: &Path) -> Result<DetectionSet> {
    parse_detections(&read_text(path)?)
}

pub fn format_detections(set: &DetectionSet) -> String {
    let header = DumpHeader {
        feature_dim: set.feature_dim(),
        source: set.source().map(str::to_owned),
        role: set.role(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for b in set.boxes() {
        let rec = BoxRecord {
            box_id: b.box_id,
            image_id: b.image_id.clone(),
            bbox: b.bbox,
            confidence: b.confidence,
            feature: b.feature.clone(),
            cluster_id: b.cluster_id,
            label: b.label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("box record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_detections(set: &DetectionSet, path: &Path) -> Result<()> {
    write_atomic(path, format_detections(set).as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtHeader {
    images: Vec<String>,
}

/// Ground-truth file: header `{"images":[...]}` listing every evaluated image,
/// then one [`GtBox`] per line.
pub fn parse_ground_truth(text: &str) -> Result<GroundTruthSet> {
    let mut lines = numbered_lines(text);
    let (hline, htext) = lines
        .next()
        .ok_or_else(|| Error::Schema("ground-truth file is empty (no header line)".into()))?;
    let header: GtHeader = serde_json::from_str(htext)
        .map_err(|e| Error::Schema(format!("line {hline}: bad header: {e}")))?;
    let mut boxes = Vec::new();
    for (n, line) in lines {
        let b: GtBox = serde_json::from_str(line).map_err(|e| Error::parse(n, e.to_string()))?;
        if let Some((k, v)) = b.attributes.iter().find(|(_, v)| v.is_nan()) {
            return Err(Error::parse(n, format!("attribute {k} is {v}")));
        }
        boxes.push(b);
    }
    Ok(GroundTruthSet::new(header.images, boxes))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    parse_ground_truth(&read_text(path)?)
}

pub fn format_ground_truth(gt: &GroundTruthSet) -> String {
    let header = GtHeader {
        images: gt.images().to_vec(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for b in gt.boxes() {
        out.push_str(&serde_json::to_string(b).expect("gt box serializes"));
        out.push('\n');
    }
    out
}

pub fn write_ground_truth(gt: &GroundTruthSet, path: &Path) -> Result<()> {
    write_atomic(path, format_ground_truth(gt).as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    box_id: u64,
    truth: Truth,
}

/// Truth-label sidecar: one `{"box_id":i,"truth":"tp"|"fp"}` per line, no
/// header.
pub fn parse_truth_labels(text: &str) -> Result<BTreeMap<u64, Truth>> {
    let mut out = BTreeMap::new();
    for (n, line) in numbered_lines(text) {
        let rec: TruthRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(n, e.to_string()))?;
        if out.insert(rec.box_id, rec.truth).is_some() {
            return Err(Error::parse(n, format!("duplicate box_id {}", rec.box_id)));
        }
    }
    Ok(out)
}

pub fn load_truth_labels(path: &Path) -> Result<BTreeMap<u64, Truth>> {
    parse_truth_labels(&read_text(path)?)
}

pub fn write_truth_labels(labels: &BTreeMap<u64, Truth>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (&box_id, &truth) in labels {
        out.push_str(&serde_json::to_string(&TruthRecord { box_id, truth }).expect("serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Pipeline configuration from a JSON object; missing fields take defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Everything needed to resume a run or inspect its clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub config: PipelineConfig,
    pub clustering: Clustering,
    /// Cluster statistics under the source confidences.
    pub seed_stats: Vec<ClusterStats>,
    pub state: PipelineState,
}

impl RunState {
    /// Structural invariants a persisted state must satisfy. The error names
    /// the first one that fails.
    pub fn check(&self) -> std::result::Result<(), String> {
        self.config.validate().map_err(|e| e.to_string())?;
        self.clustering.check()?;
        if self.seed_stats.len() != self.clustering.k {
            return Err(format!(
                "seed_stats has {} clusters, clustering has k = {}",
                self.seed_stats.len(),
                self.clustering.k
            ));
        }
        let st = &self.state;
        let Some(first) = st.history.first() else {
            return Err("history is empty".into());
        };
        let all: BTreeSet<u64> = first
            .labels
            .positive
            .iter()
            .chain(&first.labels.negative)
            .chain(&first.labels.ignored)
            .copied()
            .collect();
        let mut promoted_so_far = BTreeSet::new();
        for (i, rec) in st.history.iter().enumerate() {
            if rec.round != i {
                return Err(format!("history entry {i} records round {}", rec.round));
            }
            rec.labels
                .check_partition(&all)
                .map_err(|e| format!("round {i}: {e}"))?;
            if i > 0 {
                let prev = &st.history[i - 1].labels;
                if !prev.positive.is_subset(&rec.labels.positive) {
                    return Err(format!("round {i}: a positive box lost its label"));
                }
                if prev.ignored != rec.labels.ignored {
                    return Err(format!("round {i}: ignored set changed"));
                }
                if rec.promoted.is_empty() {
                    return Err(format!("round {i}: nothing promoted"));
                }
            } else if !rec.promoted.is_empty() {
                return Err("round 0 records promotions".into());
            }
            for &p in &rec.promoted {
                if !promoted_so_far.insert(p) {
                    return Err(format!("round {i}: {p} promoted twice"));
                }
            }
        }
        let last = st.history.len() - 1;
        if st.round != last {
            return Err(format!("state round {} but history ends at {last}", st.round));
        }
        match (st.terminated, st.selected_round) {
            (None, None) => {
                if st.final_confidences.is_some() {
                    return Err("final confidences on an unterminated run".into());
                }
                if st.labels != st.history[last].labels {
                    return Err("current labels differ from the last round".into());
                }
            }
            (Some(_), Some(sel)) => {
                if sel > last {
                    return Err(format!("selected round {sel} beyond history end {last}"));
                }
                if st.final_confidences.is_none() {
                    return Err("terminated run lacks final confidences".into());
                }
                if st.labels != st.history[sel].labels {
                    return Err("current labels differ from the selected round".into());
                }
            }
            _ => return Err("terminated and selected_round must be set together".into()),
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    latest: String,
    round: usize,
}

pub fn round_file_name(round: usize) -> String {
    format!("round-{round:04}.json")
}

/// Parses and validates one round file.
pub fn parse_run_state(text: &str) -> Result<RunState> {
    let run: RunState =
        serde_json::from_str(text).map_err(|e| Error::CorruptState(e.to_string()))?;
    run.check().map_err(Error::CorruptState)?;
    Ok(run)
}

/// Writes the round file for `run.state.round`, then points the manifest at
/// it.
pub fn save_run_state(run: &RunState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = round_file_name(run.state.round);
    let mut body = serde_json::to_string(run).expect("run state serializes");
    body.push('\n');
    write_atomic(&dir.join(&name), body.as_bytes())?;
    let manifest = Manifest {
        latest: name,
        round: run.state.round,
    };
    let mut mbody = serde_json::to_string(&manifest).expect("manifest serializes");
    mbody.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), mbody.as_bytes())
}

/// Path of the latest complete round file in `dir`.
pub fn latest_round_path(dir: &Path) -> Result<PathBuf> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_text(&mpath)?)
        .map_err(|e| Error::CorruptState(format!("{}: {e}", mpath.display())))?;
    if manifest.latest != round_file_name(manifest.round) {
        return Err(Error::CorruptState(format!(
            "manifest names {} for round {}",
            manifest.latest, manifest.round
        )));
    }
    Ok(dir.join(manifest.latest))
}

pub fn load_run_state(dir: &Path) -> Result<RunState> {
    let path = latest_round_path(dir)?;
    let run = parse_run_state(&read_text(&path)?)
        .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
    Ok(run)
}
