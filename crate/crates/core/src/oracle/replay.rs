//! Replay of recorded score tables, one table per training round.
//!
//! Script format (JSON):
//!
//! ```json
//! {"rounds": [{"train": {"0": 0.91, "1": 0.12}, "val": {"7": 0.55}}]}
//! ```
//!
//! Keys are box ids. Training for round `r` selects table `r`; a rescore
//! returns the boxes of the requested split that appear in the table with the
//! recorded confidence. Boxes missing from a table are not re-predicted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{DetectionSet, Role, ScoredBox};
use crate::error::{Error, Result};

use super::{ModelVersion, OracleConfig, Reprediction, ScorerOracle, TrainingBatch};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    #[serde(default)]
    pub train: BTreeMap<u64, f64>,
    #[serde(default)]
    pub val: BTreeMap<u64, f64>,
}

impl ScoreTable {
    pub fn split(&self, role: Role) -> &BTreeMap<u64, f64> {
        match role {
            Role::Train => &self.train,
            Role::Validation => &self.val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayScript {
    pub rounds: Vec<ScoreTable>,
}

impl ReplayScript {
    pub fn parse(text: &str) -> Result<Self> {
        let script: ReplayScript =
            serde_json::from_str(text).map_err(|e| Error::Replay(e.to_string()))?;
        for (r, table) in script.rounds.iter().enumerate() {
            for (id, c) in table.train.iter().chain(&table.val) {
                if !(0.0..=1.0).contains(c) {
                    return Err(Error::Replay(format!(
                        "round {r}: box {id} has confidence {c} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("score tables serialize")
    }
}

#[derive(Debug, Clone)]
pub struct ReplayScorer {
    script: ReplayScript,
    current: Option<usize>,
}

impl ReplayScorer {
    pub fn new(script: ReplayScript) -> Self {
        ReplayScorer {
            script,
            current: None,
        }
    }

    pub fn current_round(&self) -> Option<usize> {
        self.current
    }
}

impl ScorerOracle for ReplayScorer {
    fn train(
        &mut self,
        round: usize,
        _batch: &TrainingBatch,
        _config: &OracleConfig,
    ) -> Result<ModelVersion> {
        if round >= self.script.rounds.len() {
            return Err(Error::Replay(format!(
                "no score table for round {round} ({} recorded)",
                self.script.rounds.len()
            )));
        }
        self.current = Some(round);
        Ok(self.version())
    }

    fn rescore(&mut self, set: &DetectionSet) -> Result<Reprediction> {
        let Some(round) = self.current else {
            return Ok(Reprediction::identity(set));
        };
        let table = self.script.rounds[round].split(set.role());
        Ok(Reprediction {
            boxes: set
                .boxes()
                .iter()
                .filter_map(|b| {
                    table.get(&b.box_id).map(|&c| ScoredBox {
                        image_id: b.image_id.clone(),
                        bbox: b.bbox,
                        confidence: c,
                    })
                })
                .collect(),
        })
    }

    fn version(&self) -> ModelVersion {
        ModelVersion(self.current.map_or(0, |r| r as u64 + 1))
    }
}
