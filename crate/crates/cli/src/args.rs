use std::path::PathBuf;
use std::str::FromStr;

use boxrank::rerank::{Granularity, MaxRoundsPolicy, PipelineConfig};
use boxrank::synth::ScenarioSpec;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "boxrank", version, about = "Unsupervised false-positive suppression by box re-ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario: train/val dumps, ground truth and truth labels.
    Synth(SynthArgs),
    /// Re-rank a training dump against a validation dump.
    Rerank(RerankArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Print the cluster table of a run directory.
    Clusters(ClustersArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Full scenario description as JSON; the flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub fn_fraction: Option<f64>,
    /// Fraction of false positives drawn with true-positive confidences.
    #[arg(long)]
    pub confidence_noise: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn apply(&self, spec: &mut ScenarioSpec) {
        if let Some(v) = self.n_images {
            spec.n_images = v;
        }
        if let Some(v) = self.fn_fraction {
            spec.fn_fraction = v;
        }
        if let Some(v) = self.confidence_noise {
            spec.confidence_noise = v;
        }
        if let Some(v) = self.val_fraction {
            spec.val_fraction = v;
        }
        if let Some(v) = self.seed {
            spec.rng_seed = v;
        }
    }
}

/// Which scorer plays the detector.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleChoice {
    Linear,
    Replay(PathBuf),
    /// Program and arguments; the dump paths are appended.
    Bridge(Vec<String>),
}

impl FromStr for OracleChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "linear" {
            return Ok(OracleChoice::Linear);
        }
        if let Some(path) = s.strip_prefix("replay:").filter(|p| !p.is_empty()) {
            return Ok(OracleChoice::Replay(path.into()));
        }
        if let Some(cmd) = s.strip_prefix("bridge:") {
            let words: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if !words.is_empty() {
                return Ok(OracleChoice::Bridge(words));
            }
        }
        Err(format!("expected linear, replay:<script> or bridge:<command>, got {s:?}"))
    }
}

/// `cluster` or `instance:<boxes per round>`.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityArg(pub Granularity);

impl FromStr for GranularityArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "cluster" {
            return Ok(GranularityArg(Granularity::Cluster));
        }
        if let Some(n) = s.strip_prefix("instance:") {
            let top_k_boxes = n.parse().map_err(|e| format!("instance:{n}: {e}"))?;
            return Ok(GranularityArg(Granularity::Instance { top_k_boxes }));
        }
        Err(format!("expected cluster or instance:<n>, got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Closest,
    Last,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Receives per-round state and the final dumps.
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, default_value = "linear")]
    pub oracle: OracleChoice,
    /// Continue from the last round saved in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Pipeline configuration as JSON; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: PipelineFlags,
}

#[derive(Debug, Args, Default)]
pub struct PipelineFlags {
    /// Seed threshold on cluster-mean confidence [default: 0.95]
    #[arg(long)]
    pub h: Option<f64>,
    /// Output threshold for box counting [default: 0.4]
    #[arg(long)]
    pub o: Option<f64>,
    /// Matching IoU, exclusive [default: 0.3]
    #[arg(long)]
    pub iou_min: Option<f64>,
    /// Number of clusters [default: 100]
    #[arg(long)]
    pub k: Option<usize>,
    /// Boxes at or below this confidence are not clustered [default: 0.1]
    #[arg(long)]
    pub conf_floor: Option<f64>,
    /// Clusters promoted per round [default: 3]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// [default: 0.5]
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs per round [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2_reg: Option<f64>,
    /// L2-normalize features before clustering.
    #[arg(long)]
    pub l2_normalize: bool,
    /// Keep going after the validation count reaches the baseline.
    #[arg(long)]
    pub no_stop_on_alignment: bool,
    /// Round kept when the budget runs out [default: closest]
    #[arg(long, value_enum)]
    pub max_rounds_policy: Option<PolicyArg>,
    /// cluster or instance:<n> [default: cluster]
    #[arg(long)]
    pub granularity: Option<GranularityArg>,
}

impl PipelineFlags {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() {
                    cfg.$($field).+ = v;
                })*
            };
        }
        set!(
            h => h,
            o => o,
            iou_min => iou_min,
            k => k,
            conf_floor => conf_floor,
            top_k => top_k_clusters,
            max_rounds => max_rounds,
            nms_iou => nms_iou,
            seed => rng_seed,
            epochs => oracle.epochs_per_round,
            learning_rate => oracle.learning_rate,
            l2_reg => oracle.l2_reg,
        );
        if let Some(s) = self.seed {
            cfg.oracle.rng_seed = s;
        }
        if self.l2_normalize {
            cfg.l2_normalize = true;
        }
        if self.no_stop_on_alignment {
            cfg.stop_on_alignment = false;
        }
        if let Some(p) = self.max_rounds_policy {
            cfg.max_rounds_policy = match p {
                PolicyArg::Closest => MaxRoundsPolicy::ClosestToAlignment,
                PolicyArg::Last => MaxRoundsPolicy::LastRound,
            };
        }
        if let Some(g) = &self.granularity {
            cfg.granularity = g.0.clone();
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detection dump.
    #[arg(long)]
    pub dets: PathBuf,
    /// Ground-truth file.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = boxrank::metrics::DEFAULT_IOU_EVAL)]
    pub iou: f64,
    /// Evaluate only ground truth with NAME in [MIN, MAX]; others become ignore regions.
    #[arg(long = "filter", value_name = "NAME=MIN:MAX")]
    pub filters: Vec<String>,
    /// Write report.json and curve.csv here; the report also goes to stdout.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClustersArgs {
    pub run_dir: PathBuf,
}
