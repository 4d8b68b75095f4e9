mod common;

use std::collections::BTreeSet;
use std::fs;

use boxrank::dataio::{load_run_state, round_file_name, RunState};
use boxrank::oracle::replay::ScoreTable;
use boxrank::oracle::{
    LinearScorer, ModelVersion, OracleConfig, ReplayScorer, ReplayScript, Reprediction,
    ScorerOracle, TrainingBatch,
};
use boxrank::rerank::{
    run_pipeline, MaxRoundsPolicy, Pipeline, PipelineConfig, TerminationReason,
};
use boxrank::synth::{generate, ScenarioSpec};
use boxrank::{DetBox, DetectionSet, Error, Role};
use common::bbox;

/// Four well separated feature groups of five training boxes; group 0 is
/// confident enough to seed. Boxes 20 and 21 sit below the clustering floor.
/// Ten confident validation boxes give a baseline of ten.
fn fixture() -> (DetectionSet, DetectionSet) {
    fixture_with(2)
}

fn fixture_with(unclustered: u64) -> (DetectionSet, DetectionSet) {
    let train = (0..20 + unclustered)
        .map(|id| {
            let group = id / 5;
            let conf = match group {
                0 => 0.99,
                1..=3 => 0.5,
                _ => 0.05,
            };
            DetBox::new(id, format!("t{id}"), bbox(0.0, 0.0, 10.0, 20.0), conf, vec![group as f64 * 10.0, 0.01 * id as f64])
        })
        .collect();
    let val = (100..110u64)
        .map(|id| DetBox::new(id, format!("v{id}"), bbox(0.0, 0.0, 10.0, 20.0), 0.9, vec![0.0, 0.0]))
        .collect();
    (
        DetectionSet::new(train, 2, Role::Train).unwrap(),
        DetectionSet::new(val, 2, Role::Validation).unwrap(),
    )
}

fn fixture_config() -> PipelineConfig {
    PipelineConfig {
        k: 4,
        top_k_clusters: 1,
        ..PipelineConfig::default()
    }
}

/// A table giving train group g confidence `groups[g]` and the first
/// `val_above` validation boxes 0.9, the rest 0.1.
fn table(groups: [f64; 4], val_above: u64) -> ScoreTable {
    ScoreTable {
        train: (0..22u64)
            .map(|id| (id, groups.get((id / 5) as usize).copied().unwrap_or(0.05)))
            .collect(),
        val: (100..110u64)
            .map(|id| (id, if id - 100 < val_above { 0.9 } else { 0.1 }))
            .collect(),
    }
}

fn script(rounds: Vec<ScoreTable>) -> ReplayScript {
    ReplayScript { rounds }
}

/// Round 0 counts N_s-5, round 1 N_s-2, round 2 N_s.
fn trajectory_script() -> ReplayScript {
    script(vec![
        table([0.95, 0.8, 0.6, 0.2], 5),
        table([0.95, 0.9, 0.7, 0.2], 8),
        table([0.95, 0.9, 0.9, 0.3], 10),
        table([0.95, 0.9, 0.9, 0.9], 10),
    ])
}

fn group_of_cluster(run: &RunState, cluster: u64) -> u64 {
    let members: BTreeSet<u64> = run
        .clustering
        .assignments
        .iter()
        .filter(|(_, &c)| c as u64 == cluster)
        .map(|(&id, _)| id / 5)
        .collect();
    assert_eq!(members.len(), 1, "cluster {cluster} mixes groups");
    *members.first().unwrap()
}

#[test]
fn replayed_trajectory_stops_at_alignment() {
    let (train, val) = fixture();
    let p = Pipeline::new(&train, &val, fixture_config()).unwrap();
    let run = p.run(&mut ReplayScorer::new(trajectory_script())).unwrap();
    let st = &run.state;
    assert_eq!(st.baseline, 10);
    assert_eq!(st.val_counts(), vec![5, 8, 10]);
    assert_eq!(st.terminated, Some(TerminationReason::Alignment));
    assert_eq!(st.selected_round, Some(2));
    assert_eq!(st.round, 2);
    let log = st.promotion_log();
    assert_eq!(log.len(), 2);
    // round 1 sees round-0 scores (group 1 best), round 2 sees round-1 scores
    assert_eq!(group_of_cluster(&run, log[0].1[0]), 1);
    assert_eq!(group_of_cluster(&run, log[1].1[0]), 2);
    let versions: Vec<ModelVersion> = st.history.iter().map(|r| r.version).collect();
    assert_eq!(versions, vec![ModelVersion(1), ModelVersion(2), ModelVersion(3)]);
    assert_eq!(st.labels.positive, (0..15).collect());
    assert_eq!(st.labels.negative, (15..22).collect());
    let fin = st.final_confidences.as_ref().unwrap();
    assert_eq!(fin.val.values().filter(|&&c| c > 0.4).count(), 10);
    assert_eq!(fin.train[&19], 0.3);
}

#[test]
fn aligned_seed_model_stops_at_round_zero() {
    let (train, val) = fixture();
    let run = Pipeline::new(&train, &val, fixture_config())
        .unwrap()
        .run(&mut ReplayScorer::new(script(vec![table([0.9, 0.2, 0.2, 0.2], 10)])))
        .unwrap();
    let st = run.state;
    assert_eq!(st.terminated, Some(TerminationReason::Alignment));
    assert_eq!(st.selected_round, Some(0));
    assert_eq!(st.history.len(), 1);
    assert_eq!(st.history[0].version, ModelVersion(1));
    assert!(st.promotion_log().is_empty());
    assert_eq!(st.labels.positive, (0..5).collect());
}

#[test]
fn round_budget_keeps_the_closest_round() {
    let (train, val) = fixture();
    let tables = || {
        script(vec![
            table([0.95, 0.8, 0.6, 0.2], 5),
            table([0.95, 0.9, 0.7, 0.2], 7),
            table([0.95, 0.9, 0.9, 0.3], 6),
            table([0.95, 0.9, 0.9, 0.9], 4),
        ])
    };
    let cfg = PipelineConfig {
        max_rounds: 3,
        ..fixture_config()
    };
    let st = run_pipeline(&train, &val, &mut ReplayScorer::new(tables()), &cfg).unwrap();
    assert_eq!(st.terminated, Some(TerminationReason::MaxRounds));
    assert_eq!(st.val_counts(), vec![5, 7, 6, 4]);
    assert_eq!(st.selected_round, Some(1));
    assert_eq!(st.labels, st.history[1].labels);
    // final confidences come from the retrained round-1 model
    let fin = st.final_confidences.unwrap();
    assert_eq!(fin.val.values().filter(|&&c| c > 0.4).count(), 7);

    let last = PipelineConfig {
        max_rounds_policy: MaxRoundsPolicy::LastRound,
        ..cfg
    };
    let st = run_pipeline(&train, &val, &mut ReplayScorer::new(tables()), &last).unwrap();
    assert_eq!(st.selected_round, Some(3));
    assert_eq!(st.final_confidences.unwrap().val.values().filter(|&&c| c > 0.4).count(), 4);
}

#[test]
fn running_out_of_negative_clusters() {
    let low = || {
        script(vec![
            table([0.95, 0.8, 0.6, 0.2], 5),
            table([0.95, 0.9, 0.7, 0.2], 5),
            table([0.95, 0.9, 0.9, 0.3], 5),
            table([0.95, 0.9, 0.9, 0.9], 5),
        ])
    };
    let cfg = PipelineConfig {
        top_k_clusters: 2,
        max_rounds: 10,
        ..fixture_config()
    };
    // unclustered negatives remain, so the promotion step itself runs dry
    let (train, val) = fixture();
    let st = run_pipeline(&train, &val, &mut ReplayScorer::new(low()), &cfg).unwrap();
    assert_eq!(st.terminated, Some(TerminationReason::NegativesExhausted));
    assert_eq!(st.history.len(), 3);
    assert_eq!(st.labels.negative, [20, 21].into());

    // without them, promoting the last cluster would leave nothing to
    // train against
    let (train, val) = fixture_with(0);
    let st = run_pipeline(&train, &val, &mut ReplayScorer::new(low()), &cfg).unwrap();
    assert_eq!(st.terminated, Some(TerminationReason::NegativesExhausted));
    assert_eq!(st.history.len(), 2);
    assert_eq!(st.labels.negative.len(), 5);
}

#[test]
fn bna_holds_exactly_when_a_count_reaches_the_baseline() {
    let (train, val) = fixture();
    for (counts, expect) in [
        ([9, 9, 9, 9], TerminationReason::MaxRounds),
        ([5, 9, 10, 10], TerminationReason::Alignment),
        ([5, 10, 10, 10], TerminationReason::Alignment),
    ] {
        let tables = script(
            counts
                .iter()
                .zip([[0.95, 0.8, 0.6, 0.2], [0.95, 0.9, 0.7, 0.2], [0.95, 0.9, 0.9, 0.3], [0.95, 0.9, 0.9, 0.9]])
                .map(|(&c, g)| table(g, c))
                .collect(),
        );
        let cfg = PipelineConfig {
            max_rounds: 3,
            ..fixture_config()
        };
        let st = run_pipeline(&train, &val, &mut ReplayScorer::new(tables), &cfg).unwrap();
        assert_eq!(st.terminated, Some(expect));
        let sel = st.selected().unwrap();
        assert_eq!(expect == TerminationReason::Alignment, sel.val_count >= st.baseline);
        // alignment stops at the first round reaching the baseline
        if expect == TerminationReason::Alignment {
            assert!(st.history[..sel.round].iter().all(|r| r.val_count < st.baseline));
            assert_eq!(sel.round, st.round);
        }
    }
}

#[test]
fn replay_runs_are_byte_identical() {
    let (train, val) = fixture();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        Pipeline::new(&train, &val, fixture_config())
            .unwrap()
            .with_run_dir(d.path())
            .run(&mut ReplayScorer::new(trajectory_script()))
            .unwrap();
    }
    for round in 0..=2 {
        let name = round_file_name(round);
        assert_eq!(
            fs::read(dirs[0].path().join(&name)).unwrap(),
            fs::read(dirs[1].path().join(&name)).unwrap()
        );
    }
    assert!(!dirs[0].path().join(round_file_name(3)).exists());
}

/// Delegates to an inner oracle but fails when asked to train `fail_at`.
struct Crashing<O> {
    inner: O,
    fail_at: usize,
}

impl<O: ScorerOracle> ScorerOracle for Crashing<O> {
    fn train(&mut self, round: usize, batch: &TrainingBatch, cfg: &OracleConfig) -> boxrank::Result<ModelVersion> {
        if round == self.fail_at {
            return Err(Error::BridgeProtocol("simulated crash".into()));
        }
        self.inner.train(round, batch, cfg)
    }

    fn rescore(&mut self, set: &DetectionSet) -> boxrank::Result<Reprediction> {
        self.inner.rescore(set)
    }

    fn version(&self) -> ModelVersion {
        self.inner.version()
    }
}

#[test]
fn resuming_after_a_crash_matches_an_uninterrupted_run() {
    let (train, val) = fixture();
    let cfg = fixture_config();
    let whole_dir = tempfile::tempdir().unwrap();
    let whole = Pipeline::new(&train, &val, cfg.clone())
        .unwrap()
        .with_run_dir(whole_dir.path())
        .run(&mut ReplayScorer::new(trajectory_script()))
        .unwrap();

    for fail_at in 1..=2 {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(&train, &val, cfg.clone()).unwrap().with_run_dir(dir.path());
        let mut crashing = Crashing {
            inner: ReplayScorer::new(trajectory_script()),
            fail_at,
        };
        assert!(p.run(&mut crashing).is_err());
        let saved = load_run_state(dir.path()).unwrap();
        assert_eq!(saved.state.round, fail_at - 1);
        assert!(saved.state.terminated.is_none());

        let resumed = p.resume(&mut ReplayScorer::new(trajectory_script())).unwrap();
        assert_eq!(resumed, whole);
        let name = round_file_name(whole.state.round);
        assert_eq!(
            fs::read(dir.path().join(&name)).unwrap(),
            fs::read(whole_dir.path().join(&name)).unwrap()
        );
    }
}

#[test]
fn resume_equivalence_with_the_linear_scorer() {
    let s = generate(&ScenarioSpec::default()).unwrap();
    let cfg = PipelineConfig::default();
    let whole = Pipeline::new(&s.train, &s.val, cfg.clone())
        .unwrap()
        .run(&mut LinearScorer::new())
        .unwrap();
    assert!(whole.state.round >= 3);

    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(&s.train, &s.val, cfg.clone()).unwrap().with_run_dir(dir.path());
    let mut crashing = Crashing {
        inner: LinearScorer::new(),
        fail_at: 3,
    };
    assert!(p.run(&mut crashing).is_err());
    let resumed = p.resume(&mut LinearScorer::new()).unwrap();
    assert_eq!(resumed, whole);

    // a different configuration cannot resume this directory
    let other = PipelineConfig { top_k_clusters: 4, ..cfg };
    let q = Pipeline::new(&s.train, &s.val, other).unwrap().with_run_dir(dir.path());
    assert!(matches!(q.resume(&mut LinearScorer::new()), Err(Error::InvalidConfig(_))));
}

#[test]
fn synthetic_run_invariants() {
    let s = generate(&ScenarioSpec::default()).unwrap();
    let before = s.train.clone();
    let cfg = PipelineConfig::default();
    let run = Pipeline::new(&s.train, &s.val, cfg.clone())
        .unwrap()
        .run(&mut LinearScorer::new())
        .unwrap();
    let st = &run.state;
    assert_eq!(s.train, before);
    run.check().unwrap();

    let all: BTreeSet<u64> = s.train.boxes().iter().map(|b| b.box_id).collect();
    for w in st.history.windows(2) {
        let (a, b) = (&w[0].labels, &w[1].labels);
        a.check_partition(&all).unwrap();
        assert!(a.positive.is_subset(&b.positive) && a.positive.len() < b.positive.len());
        assert!(b.negative.is_subset(&a.negative) && b.negative.len() < a.negative.len());
        assert_eq!(a.ignored, b.ignored);
    }
    // unclustered boxes never leave the negative part
    for b in s.train.boxes().iter().filter(|b| b.confidence <= cfg.conf_floor) {
        assert!(st.labels.negative.contains(&b.box_id));
    }
    let promoted: Vec<u64> = st.promotion_log().into_iter().flat_map(|(_, p)| p).collect();
    let distinct: BTreeSet<u64> = promoted.iter().copied().collect();
    assert_eq!(promoted.len(), distinct.len());
    assert!(st.round <= cfg.max_rounds);

    let reason = st.terminated.unwrap();
    let sel = st.selected().unwrap();
    assert_eq!(reason == TerminationReason::Alignment, sel.val_count >= st.baseline);

    let fin = st.final_confidences.as_ref().unwrap();
    let ids: BTreeSet<u64> = fin.train.keys().copied().collect();
    assert_eq!(ids, all);
    assert!(fin.train.values().chain(fin.val.values()).all(|c| (0.0..=1.0).contains(c)));
}
