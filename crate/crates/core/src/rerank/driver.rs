use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::boxgeom::{match_boxes, DetectionSet, Role};
use crate::clustering::{cluster_boxes_with, cluster_stats, KMeansConfig};
use crate::dataio::{load_run_state, save_run_state, RunState};
use crate::error::{Error, Result};
use crate::oracle::{ScorerOracle, TrainingBatch};

use super::{
    count_boxes, promote_clusters, promote_instances, select_instance_seeds, select_seeds,
    FinalConfidences, Granularity, LabelSet, MaxRoundsPolicy, PipelineConfig, PipelineState,
    RoundRecord, TerminationReason,
};

/// Runs re-ranking to completion without persisting anything.
pub fn run_pipeline<O: ScorerOracle + ?Sized>(
    train: &DetectionSet,
    val: &DetectionSet,
    oracle: &mut O,
    cfg: &PipelineConfig,
) -> Result<PipelineState> {
    Ok(Pipeline::new(train, val, cfg.clone())?.run(oracle)?.state)
}

/// The round driver. Clusters once, seeds, then alternates re-prediction,
/// promotion and retraining until the validation count reaches the source
/// model's count, no fully negative cluster is left, or the round budget is
/// spent. With a run directory the state is saved after every round.
pub struct Pipeline<'a> {
    train: &'a DetectionSet,
    val: &'a DetectionSet,
    cfg: PipelineConfig,
    run_dir: Option<PathBuf>,
}

impl<'a> Pipeline<'a> {
    pub fn new(train: &'a DetectionSet, val: &'a DetectionSet, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if train.role() != Role::Train {
            return Err(Error::InvalidConfig("training dump does not have the train role".into()));
        }
        if val.role() != Role::Validation {
            return Err(Error::InvalidConfig(
                "validation dump does not have the validation role".into(),
            ));
        }
        if !val.is_empty() && val.feature_dim() != train.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "feature_dim differs between train ({}) and val ({})",
                train.feature_dim(),
                val.feature_dim()
            )));
        }
        Ok(Pipeline {
            train,
            val,
            cfg,
            run_dir: None,
        })
    }

    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn run<O: ScorerOracle + ?Sized>(&self, oracle: &mut O) -> Result<RunState> {
        let run = self.start(oracle)?;
        self.drive(oracle, run)
    }

    /// Continues from the last round saved in the run directory. The oracle
    /// is retrained on that round's labels first.
    pub fn resume<O: ScorerOracle + ?Sized>(&self, oracle: &mut O) -> Result<RunState> {
        let dir = self
            .run_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("resume needs a run directory".into()))?;
        let run = load_run_state(dir)?;
        if run.config != self.cfg {
            return Err(Error::InvalidConfig(
                "configuration differs from the saved run".into(),
            ));
        }
        if run.state.terminated.is_some() {
            return Ok(run);
        }
        let last = run.state.history.last().expect("validated state has round 0");
        oracle.train(last.round, &self.batch(&last.labels), &self.cfg.oracle)?;
        self.drive(oracle, run)
    }

    fn batch(&self, labels: &LabelSet) -> TrainingBatch {
        TrainingBatch::from_labels(self.train, labels)
    }

    fn persist(&self, run: &RunState) -> Result<()> {
        match &self.run_dir {
            Some(dir) => save_run_state(run, dir),
            None => Ok(()),
        }
    }

    fn count<O: ScorerOracle + ?Sized>(&self, oracle: &mut O) -> Result<usize> {
        count_boxes(oracle, self.val, self.cfg.o, self.cfg.nms_iou, self.cfg.iou_min)
    }

    fn start<O: ScorerOracle + ?Sized>(&self, oracle: &mut O) -> Result<RunState> {
        let cfg = &self.cfg;
        let kcfg = KMeansConfig {
            l2_normalize: cfg.l2_normalize,
            ..KMeansConfig::new(cfg.k, cfg.conf_floor, cfg.rng_seed)
        };
        let clustering = cluster_boxes_with(self.train, &kcfg)?;
        let seed_stats = cluster_stats(&clustering, self.train);
        let labels = match cfg.granularity {
            Granularity::Cluster => select_seeds(&seed_stats, cfg.h, self.train)?,
            Granularity::Instance { .. } => select_instance_seeds(self.train, cfg.h)?,
        };

        let baseline = self.count(oracle)?;
        let version = oracle.train(0, &self.batch(&labels), &cfg.oracle)?;
        let val_count = self.count(oracle)?;
        log::info!(
            "round 0: {} seed positives, {} negatives, {} ignored; val count {val_count}, baseline {baseline}",
            labels.positive.len(),
            labels.negative.len(),
            labels.ignored.len()
        );

        let run = RunState {
            config: cfg.clone(),
            clustering,
            seed_stats,
            state: PipelineState {
                round: 0,
                labels: labels.clone(),
                baseline,
                history: vec![RoundRecord {
                    round: 0,
                    version,
                    val_count,
                    promoted: Vec::new(),
                    labels,
                }],
                terminated: None,
                selected_round: None,
                final_confidences: None,
            },
        };
        self.persist(&run)?;
        Ok(run)
    }

    fn drive<O: ScorerOracle + ?Sized>(&self, oracle: &mut O, mut run: RunState) -> Result<RunState> {
        let cfg = &self.cfg;
        let eligible: BTreeSet<u64> = run.clustering.assignments.keys().copied().collect();
        loop {
            let last = run.state.history.last().expect("round 0 recorded");
            if cfg.stop_on_alignment && last.val_count >= run.state.baseline {
                let round = last.round;
                return self.finish(oracle, run, TerminationReason::Alignment, round);
            }
            if last.round >= cfg.max_rounds {
                let selected = match cfg.max_rounds_policy {
                    MaxRoundsPolicy::LastRound => last.round,
                    MaxRoundsPolicy::ClosestToAlignment => {
                        // highest count, earliest round on ties
                        run.state
                            .history
                            .iter()
                            .rev()
                            .max_by_key(|r| r.val_count)
                            .map(|r| r.round)
                            .unwrap_or(last.round)
                    }
                };
                return self.finish(oracle, run, TerminationReason::MaxRounds, selected);
            }

            let round = last.round + 1;
            let repredicted = oracle.rescore(self.train)?;
            let updated = match_boxes(self.train, &repredicted.boxes, cfg.iou_min);
            let promotion = match cfg.granularity {
                Granularity::Cluster => {
                    let stats = cluster_stats(&run.clustering, &self.train.with_confidences(&updated));
                    promote_clusters(&run.state.labels, &stats, cfg.top_k_clusters).map(|p| {
                        let ids = p.promoted.iter().map(|&c| c as u64).collect();
                        (p.labels, ids)
                    })
                }
                Granularity::Instance { top_k_boxes } => promote_instances(
                    &run.state.labels,
                    self.train,
                    &updated,
                    &eligible,
                    top_k_boxes,
                ),
            };
            // a promotion that leaves no negatives cannot be trained on
            let (labels, promoted) = match promotion {
                Ok((labels, _)) if labels.negative.is_empty() => {
                    let round = last.round;
                    return self.finish(oracle, run, TerminationReason::NegativesExhausted, round);
                }
                Ok(p) => p,
                Err(Error::NegativesExhausted) => {
                    let round = last.round;
                    return self.finish(oracle, run, TerminationReason::NegativesExhausted, round);
                }
                Err(e) => return Err(e),
            };

            let version = oracle.train(round, &self.batch(&labels), &cfg.oracle)?;
            let val_count = self.count(oracle)?;
            log::info!(
                "round {round}: promoted {promoted:?}; val count {val_count}, baseline {}",
                run.state.baseline
            );
            run.state.history.push(RoundRecord {
                round,
                version,
                val_count,
                promoted,
                labels: labels.clone(),
            });
            run.state.round = round;
            run.state.labels = labels;
            self.persist(&run)?;
        }
    }

    fn finish<O: ScorerOracle + ?Sized>(
        &self,
        oracle: &mut O,
        mut run: RunState,
        reason: TerminationReason,
        selected: usize,
    ) -> Result<RunState> {
        let last_round = run.state.history.last().map_or(0, |r| r.round);
        let record = run.state.history[selected].clone();
        if selected != last_round {
            oracle.train(selected, &self.batch(&record.labels), &self.cfg.oracle)?;
        }
        let train = match_boxes(self.train, &oracle.rescore(self.train)?.boxes, self.cfg.iou_min);
        let val = if self.val.is_empty() {
            Default::default()
        } else {
            match_boxes(self.val, &oracle.rescore(self.val)?.boxes, self.cfg.iou_min)
        };
        log::info!(
            "terminated ({reason:?}) after round {last_round}; returning round {selected} with val count {}, baseline {}",
            record.val_count,
            run.state.baseline
        );
        run.state.terminated = Some(reason);
        run.state.selected_round = Some(selected);
        run.state.labels = record.labels;
        run.state.final_confidences = Some(FinalConfidences { train, val });
        self.persist(&run)?;
        Ok(run)
    }
}
