mod args;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use args::{Cli, ClustersArgs, Command, EvalArgs, OracleChoice, RerankArgs, SynthArgs};
use boxrank::dataio::{
    load_config, load_detections, load_ground_truth, load_run_state, write_detections,
    write_ground_truth, write_truth_labels, RunState, MANIFEST_FILE,
};
use boxrank::metrics::{evaluate, GtFilter};
use boxrank::oracle::bridge::SpawnedBridge;
use boxrank::oracle::{LinearScorer, ReplayScorer, ReplayScript, ScorerOracle};
use boxrank::rerank::{Pipeline, PipelineConfig};
use boxrank::synth::{generate, ScenarioSpec};
use boxrank::{Error, Role};
use clap::Parser;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

pub const FINAL_TRAIN: &str = "train.final.jsonl";
pub const FINAL_VAL: &str = "val.final.jsonl";

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file", path.display())))
    }
}

fn synth(a: &SynthArgs) -> CmdResult {
    let mut spec = match &a.spec {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => ScenarioSpec::default(),
    };
    a.apply(&mut spec);
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let s = generate(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(Error::Io { path: a.out.clone(), source: e }))?;
    write_detections(&s.train, &a.out.join("train.jsonl"))?;
    write_detections(&s.val, &a.out.join("val.jsonl"))?;
    write_ground_truth(&s.ground_truth, &a.out.join("gt.jsonl"))?;
    write_ground_truth(&s.split_ground_truth(Role::Train), &a.out.join("gt.train.jsonl"))?;
    write_ground_truth(&s.split_ground_truth(Role::Validation), &a.out.join("gt.val.jsonl"))?;
    write_truth_labels(&s.truth_labels, &a.out.join("truth.jsonl"))?;
    log::info!(
        "synth: {} train and {} val boxes over {} images in {}",
        s.train.len(),
        s.val.len(),
        spec.n_images,
        a.out.display()
    );
    Ok(())
}

fn rerank_config(a: &RerankArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            load_config(p)?
        }
        // a resumed run keeps its saved configuration unless overridden
        None if a.resume && a.run_dir.join(MANIFEST_FILE).is_file() => load_run_state(&a.run_dir)?.config,
        None => PipelineConfig::default(),
    };
    a.flags.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn rerank(a: &RerankArgs) -> CmdResult {
    require_file(&a.train)?;
    require_file(&a.val)?;
    if let OracleChoice::Replay(p) = &a.oracle {
        require_file(p)?;
    }
    if a.resume && !a.run_dir.join(MANIFEST_FILE).is_file() {
        return Err(Failure::Usage(format!("{}: no saved run to resume", a.run_dir.display())));
    }
    let cfg = rerank_config(a)?;
    let train = load_detections(&a.train)?;
    let val = load_detections(&a.val)?;
    let pipeline = Pipeline::new(&train, &val, cfg)?.with_run_dir(&a.run_dir);

    let mut oracle: Box<dyn ScorerOracle> = match &a.oracle {
        OracleChoice::Linear => Box::new(LinearScorer::new()),
        OracleChoice::Replay(p) => Box::new(ReplayScorer::new(ReplayScript::load(p)?)),
        OracleChoice::Bridge(cmd) => Box::new(SpawnedBridge::spawn(&cmd[0], &cmd[1..], &a.train, &a.val)?),
    };
    let run = if a.resume {
        pipeline.resume(&mut oracle)?
    } else {
        pipeline.run(&mut oracle)?
    };
    drop(oracle);

    let st = &run.state;
    let fin = st.final_confidences.as_ref().expect("terminated run has final confidences");
    let labels = |id| st.labels.label_of(id);
    let train_out = train.with_confidences(&fin.train).annotated(labels, &run.clustering.assignments);
    write_detections(&train_out, &a.run_dir.join(FINAL_TRAIN))?;
    write_detections(&val.with_confidences(&fin.val), &a.run_dir.join(FINAL_VAL))?;

    let summary = serde_json::json!({
        "terminated": st.terminated,
        "rounds": st.round,
        "selected_round": st.selected_round,
        "baseline": st.baseline,
        "val_counts": st.val_counts(),
        "positives": st.labels.positive.len(),
        "negatives": st.labels.negative.len(),
        "ignored": st.labels.ignored.len(),
    });
    println!("{summary}");
    Ok(())
}

fn parse_filter(spec: &str) -> Result<(String, f64, f64), Failure> {
    let bad = || Failure::Usage(format!("--filter {spec:?}: expected NAME=MIN:MAX"));
    let (name, range) = spec.split_once('=').ok_or_else(bad)?;
    let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if name.is_empty() || !(lo <= hi) {
        return Err(bad());
    }
    Ok((name.to_string(), lo, hi))
}

fn eval(a: &EvalArgs) -> CmdResult {
    require_file(&a.dets)?;
    require_file(&a.gt)?;
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Failure::Usage(format!("--iou must be in (0, 1], got {}", a.iou)));
    }
    let mut filter = GtFilter::new();
    for f in &a.filters {
        let (name, lo, hi) = parse_filter(f)?;
        filter = filter.range(name, lo, hi);
    }
    let dets = load_detections(&a.dets)?;
    let gt = load_ground_truth(&a.gt)?.filtered(&filter);
    let report = evaluate(&dets, &gt, a.iou)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(dir) = &a.out_dir {
        let io = |e| Failure::Runtime(Error::Io { path: dir.clone(), source: e });
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("report.json"), format!("{json}\n")).map_err(io)?;
        fs::write(dir.join("curve.csv"), report.curve_csv()).map_err(io)?;
    }
    log::info!("eval: log-average miss rate {:.4}, AP {:.4}", report.log_avg_mr, report.ap);
    Ok(())
}

/// One row per cluster under the labels of the selected (or latest) round.
fn cluster_table(run: &RunState) -> String {
    let st = &run.state;
    let promoted_in: BTreeMap<u64, usize> = st
        .promotion_log()
        .into_iter()
        .flat_map(|(round, ids)| ids.into_iter().map(move |id| (id, round)))
        .collect();
    let cluster_level = matches!(run.config.granularity, boxrank::rerank::Granularity::Cluster);
    let mut out = String::from("cluster  size  mean_conf  label     outliers  since\n");
    for c in &run.seed_stats {
        let labels: Vec<_> = c
            .members
            .iter()
            .filter(|id| !st.labels.ignored.contains(id))
            .map(|&id| st.labels.label_of(id))
            .collect();
        let label = if labels.is_empty() {
            "-"
        } else if labels.iter().all(|l| *l == boxrank::Label::Positive) {
            "positive"
        } else if labels.iter().all(|l| *l == boxrank::Label::Negative) {
            "negative"
        } else {
            "mixed"
        };
        let since = match promoted_in.get(&(c.index as u64)) {
            Some(r) if cluster_level => format!("round {r}"),
            _ if cluster_level && label == "positive" => "seed".to_string(),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:>7}  {:>4}  {:>9.4}  {:<8}  {:>8}  {}",
            c.index,
            c.member_count,
            c.mean_confidence,
            label,
            c.outliers.len(),
            since
        );
    }
    out
}

fn clusters(a: &ClustersArgs) -> CmdResult {
    if !a.run_dir.join(MANIFEST_FILE).is_file() {
        return Err(Failure::Usage(format!("{}: not a run directory", a.run_dir.display())));
    }
    let run = load_run_state(&a.run_dir)?;
    print!("{}", cluster_table(&run));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Clusters(a) => clusters(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
