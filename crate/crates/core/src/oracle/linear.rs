//! Logistic scorer over box features.
//!
//! Features are standardized with the batch statistics, the weights start
//! from zero every round, and training is full-batch gradient descent on a
//! class-balanced, L2-regularized logistic loss. A step that would raise the
//! loss is retried with half the learning rate, at most ten times.

use crate::boxgeom::{DetectionSet, ScoredBox};
use crate::error::Result;

use super::{ModelVersion, OracleConfig, Reprediction, ScorerOracle, TrainingBatch};

const STEP_BATCH: usize = 256;
const MAX_LR_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
struct Model {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Model {
    fn logit(&self, feature: &[f64]) -> f64 {
        self.bias
            + feature
                .iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LinearScorer {
    model: Option<Model>,
    version: ModelVersion,
    loss_trace: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standardized design matrix with per-example class weights.
#[derive(Debug, Clone)]
pub struct Problem {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<bool>,
    pub sample_weights: Vec<f64>,
    pub l2: f64,
}

impl Problem {
    /// Class weights are inverse frequency, normalized so they average one.
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<bool>, l2: f64) -> Self {
        let n = targets.len() as f64;
        let pos = targets.iter().filter(|&&t| t).count() as f64;
        let neg = n - pos;
        let sample_weights = targets
            .iter()
            .map(|&t| if t { n / (2.0 * pos) } else { n / (2.0 * neg) })
            .collect();
        Problem {
            rows,
            targets,
            sample_weights,
            l2,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Loss and gradient at `params` = weights followed by the bias. The bias
    /// is not regularized.
    pub fn loss_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim();
        let (w, b) = params.split_at(d);
        let b = b[0];
        let n = self.rows.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; d + 1];
        for ((x, &y), &sw) in self.rows.iter().zip(&self.targets).zip(&self.sample_weights) {
            let z = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            loss += sw * if y { softplus(-z) } else { softplus(z) };
            let r = sw * (sigmoid(z) - if y { 1.0 } else { 0.0 });
            for (g, a) in grad.iter_mut().zip(x) {
                *g += r * a;
            }
            grad[d] += r;
        }
        loss /= n;
        for g in &mut grad {
            *g /= n;
        }
        loss += 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        for (g, v) in grad.iter_mut().zip(w) {
            *g += self.l2 * v;
        }
        (loss, grad)
    }
}

fn standardization(batch: &TrainingBatch) -> (Vec<f64>, Vec<f64>) {
    let d = batch.examples[0].feature.len();
    let n = batch.len() as f64;
    let mut mean = vec![0.0; d];
    for e in &batch.examples {
        for (m, v) in mean.iter_mut().zip(&e.feature) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for e in &batch.examples {
        for ((s, v), m) in var.iter_mut().zip(&e.feature).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

impl LinearScorer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loss after each accepted step of the last training round, starting
    /// with the loss at the zero initialization.
    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    /// Probability the current model assigns to `feature`; `None` before
    /// training.
    pub fn score(&self, feature: &[f64]) -> Option<f64> {
        self.model.as_ref().map(|m| sigmoid(m.logit(feature)))
    }

    /// Number of gradient steps taken per round for a batch of `n` examples.
    pub fn steps_for(n: usize, config: &OracleConfig) -> usize {
        config.epochs_per_round * n.div_ceil(STEP_BATCH)
    }
}

impl ScorerOracle for LinearScorer {
    fn train(
        &mut self,
        round: usize,
        batch: &TrainingBatch,
        config: &OracleConfig,
    ) -> Result<ModelVersion> {
        config.validate()?;
        batch.check()?;

        let (mean, scale) = standardization(batch);
        let rows = batch
            .examples
            .iter()
            .map(|e| {
                e.feature
                    .iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect();
        let targets = batch.examples.iter().map(|e| e.positive).collect();
        let problem = Problem::new(rows, targets, config.l2_reg);

        let d = problem.dim();
        let mut params = vec![0.0; d + 1];
        let mut lr = config.learning_rate;
        let (mut loss, mut grad) = problem.loss_and_gradient(&params);
        let mut trace = vec![loss];

        'steps: for _ in 0..Self::steps_for(batch.len(), config) {
            let mut halvings = 0;
            loop {
                let trial: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
                let (trial_loss, trial_grad) = problem.loss_and_gradient(&trial);
                if trial_loss <= loss {
                    params = trial;
                    loss = trial_loss;
                    grad = trial_grad;
                    trace.push(loss);
                    break;
                }
                if halvings == MAX_LR_HALVINGS {
                    break 'steps;
                }
                lr *= 0.5;
                halvings += 1;
            }
        }

        let bias = params.pop().unwrap_or(0.0);
        self.model = Some(Model {
            weights: params,
            bias,
            mean,
            scale,
        });
        self.loss_trace = trace;
        self.version = ModelVersion(round as u64 + 1);
        log::debug!(
            "linear scorer: round {round} trained on {} (+{} / -{}) loss {loss:.6}",
            batch.len(),
            batch.positives(),
            batch.negatives()
        );
        Ok(self.version)
    }

    fn rescore(&mut self, set: &DetectionSet) -> Result<Reprediction> {
        let Some(model) = &self.model else {
            return Ok(Reprediction::identity(set));
        };
        Ok(Reprediction {
            boxes: set
                .boxes()
                .iter()
                .map(|b| ScoredBox {
                    image_id: b.image_id.clone(),
                    bbox: b.bbox,
                    confidence: sigmoid(model.logit(&b.feature)),
                })
                .collect(),
        })
    }

    fn version(&self) -> ModelVersion {
        self.version
    }
}
