//! One-epoch Adam training and batch prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bce_with_logit, CtrModel, Gradients, ModelParams, ParamGroup, Retrieval};
use crate::dataset::Sample;
use crate::embedding_store::EmbeddingTable;
use crate::error::{MuseError, Result};
use crate::metrics::EvalRecord;
use crate::UserId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate for ID and context embedding tables.
    pub lr_embedding: f64,
    /// Learning rate for attention projections, γ and the tower.
    pub lr_dense: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_embedding: 2e-3,
            lr_dense: 2e-4,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MuseError::Config("batch_size must be positive".into()));
        }
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.lr_embedding) || !finite_pos(self.lr_dense) || !finite_pos(self.epsilon) {
            return Err(MuseError::Config(
                "learning rates and epsilon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MuseError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction and one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, _, t)| vec![0.0; t.len()])
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let g_all = grads.tensors();
        for (((group, p), g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let lr = match group {
                ParamGroup::Embedding => cfg.lr_embedding,
                ParamGroup::Dense => cfg.lr_dense,
            };
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub samples: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    pub samples_seen: usize,
}

impl TrainingLog {
    /// Sample-weighted mean loss over the first `n` steps.
    pub fn head_loss(&self, n: usize) -> Option<f64> {
        Self::mean(&self.steps[..n.min(self.steps.len())])
    }

    /// Sample-weighted mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        Self::mean(&self.steps[self.steps.len().saturating_sub(n)..])
    }

    fn mean(steps: &[StepLog]) -> Option<f64> {
        let n: usize = steps.iter().map(|s| s.samples).sum();
        (n > 0).then(|| steps.iter().map(|s| s.loss * s.samples as f64).sum::<f64>() / n as f64)
    }
}

/// Retrieval results for every sample. Valid for the whole run when the
/// strategy does not depend on learned embeddings.
pub fn prepare_retrievals(
    model: &CtrModel,
    samples: &[Sample],
    table: &EmbeddingTable,
) -> Result<Vec<Retrieval>> {
    samples
        .par_iter()
        .with_min_len(64)
        .map(|s| model.retrieve(s, table))
        .collect()
}

/// One pass over `samples` in order. `cache`, if given, must come from
/// [`prepare_retrievals`] on the same samples and is ignored for strategies
/// that read learned embeddings.
pub fn train(
    model: &mut CtrModel,
    samples: &[Sample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    cache: Option<&[Retrieval]>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if let Some(c) = cache {
        if c.len() != samples.len() {
            return Err(MuseError::Shape(format!(
                "{} cached retrievals for {} samples",
                c.len(),
                samples.len()
            )));
        }
    }
    let dynamic = model.retriever().uses_learned_embeddings();
    let mut adam = Adam::new(&model.params);
    let mut grads = Gradients::zeros_like(&model.params);
    let mut log = TrainingLog::default();
    let mut scratch: Vec<Retrieval>;
    for (step, start) in (0..samples.len()).step_by(cfg.batch_size).enumerate() {
        let end = (start + cfg.batch_size).min(samples.len());
        let batch = &samples[start..end];
        let retrievals: &[Retrieval] = match cache {
            Some(c) if !dynamic => &c[start..end],
            _ => {
                scratch = batch
                    .iter()
                    .map(|s| model.retrieve(s, table))
                    .collect::<Result<_>>()?;
                &scratch
            }
        };
        let pairs: Vec<(&Sample, &Retrieval)> = batch.iter().zip(retrievals).collect();
        let loss = model.loss_and_gradients(&pairs, &mut grads)?;
        if !loss.is_finite() {
            return Err(MuseError::Divergence { step, loss });
        }
        adam.step(&mut model.params, &grads, cfg);
        if !model.params.is_finite() {
            return Err(MuseError::Divergence { step, loss: f64::NAN });
        }
        log.steps.push(StepLog {
            step,
            samples: batch.len(),
            loss,
        });
        log.samples_seen += batch.len();
        if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.6}");
        }
    }
    Ok(log)
}

/// Probabilities with their GAUC group keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBatch {
    pub probabilities: Vec<f64>,
    pub groups: Vec<UserId>,
}

impl PredictionBatch {
    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Evaluation records for the same samples the batch was predicted on.
    pub fn eval_records(&self, samples: &[Sample]) -> Vec<EvalRecord> {
        samples
            .iter()
            .zip(&self.probabilities)
            .map(|(s, &p)| EvalRecord {
                user: s.user,
                score: p,
                label: s.label,
                behavior_len: Some(s.sequence.len()),
                item: Some(s.target.item),
            })
            .collect()
    }
}

/// Predicts every sample independently; output order follows `samples`.
pub fn predict_batch(
    model: &CtrModel,
    samples: &[Sample],
    table: &EmbeddingTable,
    cache: Option<&[Retrieval]>,
) -> Result<PredictionBatch> {
    let probabilities = samples
        .par_iter()
        .enumerate()
        .with_min_len(64)
        .map(|(i, s)| {
            let fresh;
            let r = match cache {
                Some(c) => &c[i],
                None => {
                    fresh = model.retrieve(s, table)?;
                    &fresh
                }
            };
            model.forward_with(s, r).map(|t| t.probability)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionBatch {
        probabilities,
        groups: samples.iter().map(|s| s.user).collect(),
    })
}

/// Mean BCE of `model` over `samples`.
pub fn mean_loss(
    model: &CtrModel,
    samples: &[Sample],
    table: &EmbeddingTable,
    cache: Option<&[Retrieval]>,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let losses = samples
        .par_iter()
        .enumerate()
        .with_min_len(64)
        .map(|(i, s)| {
            let fresh;
            let r = match cache {
                Some(c) => &c[i],
                None => {
                    fresh = model.retrieve(s, table)?;
                    &fresh
                }
            };
            model.forward_with(s, r).map(|t| bce_with_logit(t.logit, s.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}
