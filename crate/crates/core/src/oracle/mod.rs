//! The scorer oracle: the train/re-predict cycle that stands in for
//! fine-tuning a detector on pseudo labels and re-running it.
//!
//! Three implementations ship with the crate. [`LinearScorer`] is a logistic
//! model over box features, [`ReplayScorer`] plays back recorded score tables,
//! and [`BridgeScorer`] talks to an external detector process over
//! line-delimited JSON.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{DetectionSet, ScoredBox};
use crate::error::{Error, Result};
use crate::rerank::LabelSet;

pub mod bridge;
pub mod linear;
pub mod replay;

pub use bridge::BridgeScorer;
pub use linear::LinearScorer;
pub use replay::{ReplayScorer, ReplayScript};

/// Opaque model version. Version 0 is the untrained source model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVersion(pub u64);

impl ModelVersion {
    pub const SOURCE: ModelVersion = ModelVersion(0);
}

impl fmt::Display for ModelVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Weight of the localization term. Built-in scorers ignore it; it is
    /// forwarded to bridge processes.
    pub loss_weight: f64,
    pub epochs_per_round: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub rng_seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            loss_weight: 1.0,
            epochs_per_round: 5,
            learning_rate: 1.0,
            l2_reg: 1e-3,
            rng_seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round < 1 {
            return Err(Error::InvalidConfig("epochs_per_round must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return Err(Error::InvalidConfig("l2_reg must be >= 0".into()));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::InvalidConfig("loss_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub box_id: u64,
    pub feature: Vec<f64>,
    pub positive: bool,
}

/// Binary training examples; ignored and unlabeled boxes never appear.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub examples: Vec<Example>,
}

impl TrainingBatch {
    /// Positives and negatives of `labels`, in the box order of `set`.
    pub fn from_labels(set: &DetectionSet, labels: &LabelSet) -> Self {
        let examples = set
            .boxes()
            .iter()
            .filter_map(|b| {
                let positive = if labels.positive.contains(&b.box_id) {
                    true
                } else if labels.negative.contains(&b.box_id) {
                    false
                } else {
                    return None;
                };
                Some(Example {
                    box_id: b.box_id,
                    feature: b.feature.clone(),
                    positive,
                })
            })
            .collect();
        TrainingBatch { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Fails with `DegenerateBatch` unless both classes are present.
    pub fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::DegenerateBatch("batch is empty".into()));
        }
        if self.positives() == 0 {
            return Err(Error::DegenerateBatch("no positive examples".into()));
        }
        if self.negatives() == 0 {
            return Err(Error::DegenerateBatch("no negative examples".into()));
        }
        Ok(())
    }
}

/// Boxes re-predicted by the current model for one split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reprediction {
    pub boxes: Vec<ScoredBox>,
}

impl Reprediction {
    /// Identity re-prediction: the input boxes with their own confidences.
    pub fn identity(set: &DetectionSet) -> Self {
        Reprediction {
            boxes: set
                .boxes()
                .iter()
                .map(|b| ScoredBox {
                    image_id: b.image_id.clone(),
                    bbox: b.bbox,
                    confidence: b.confidence,
                })
                .collect(),
        }
    }
}

pub trait ScorerOracle {
    /// Fits a new model for `round` from the source state and returns its
    /// version.
    fn train(&mut self, round: usize, batch: &TrainingBatch, config: &OracleConfig)
        -> Result<ModelVersion>;

    /// Re-predicts boxes for `set` with the current model. Before any
    /// training this is the source model.
    fn rescore(&mut self, set: &DetectionSet) -> Result<Reprediction>;

    fn version(&self) -> ModelVersion;
}

impl<T: ScorerOracle + ?Sized> ScorerOracle for Box<T> {
    fn train(
        &mut self,
        round: usize,
        batch: &TrainingBatch,
        config: &OracleConfig,
    ) -> Result<ModelVersion> {
        (**self).train(round, batch, config)
    }

    fn rescore(&mut self, set: &DetectionSet) -> Result<Reprediction> {
        (**self).rescore(set)
    }

    fn version(&self) -> ModelVersion {
        (**self).version()
    }
}
