//! Adam, the mini-batch training loop and checkpoint persistence.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    Checkpoint, EmbeddingRef, EpochLog, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PaddedBatch, Session, NUM_TASKS};
use crate::error::{Error, Result};
use crate::eval::mean_aa;
use crate::features::{EncodedSession, FeaturePipeline, TrackCatalog};
use crate::net::{loss, ModelConfig, ModelParams, VariantConfig, DEFAULT_TASK_WEIGHTS};
use crate::scalar::Scalar;
use crate::tensor_graph::{Graph, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub threshold: f64,
    pub task_weights: [f64; NUM_TASKS],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            lr: 0.0005,
            seed: 7,
            clip_norm: None,
            threshold: 0.5,
            task_weights: DEFAULT_TASK_WEIGHTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Everything a training run reads besides its config.
pub struct TrainData<'a> {
    pub train: &'a [Session],
    pub valid: &'a [Session],
    pub pipeline: &'a FeaturePipeline,
    pub catalog: &'a TrackCatalog,
    pub embedding: Option<EmbeddingRef>,
}

pub fn new_adam<T: Scalar>(params: &ModelParams<T>, config: AdamConfig) -> AdamState<T> {
    AdamState::new(config, params.named_params().iter().map(|(_, m)| m.shape()))
}

/// Forward, loss, backward and one Adam update. Returns the batch loss.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    batch: &PaddedBatch<T>,
    task_weights: &[f64; NUM_TASKS],
) -> Result<f64> {
    let mut g = Graph::new();
    let fw = params.forward_train(&mut g, batch)?;
    let l = loss(&mut g, fw.logits, batch, task_weights)?;
    g.backward(l)?;
    let value = g.value(l).get(0, 0).as_f64();
    let named = params.named_params();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let grads: Vec<Matrix<T>> = fw
        .bound
        .vars()
        .iter()
        .zip(&named)
        .map(|(&v, (_, m))| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();
    adam.step(&mut params.params_mut(), &grads, &names)?;
    Ok(value)
}

/// Mean AA of thresholded skip predictions against the sessions' own labels.
pub fn evaluate_batches<T: Scalar>(
    params: &ModelParams<T>,
    batches: &[PaddedBatch<T>],
    truths: &[(String, Vec<bool>)],
    threshold: f64,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(truths.len());
    for b in batches {
        preds.extend(
            params
                .predict_batch(b)?
                .into_iter()
                .map(|p| (p.session_id.clone(), p.skips(threshold))),
        );
    }
    Ok(mean_aa(&preds, truths)?.mean_aa)
}

fn truths(sessions: &[Session]) -> Result<Vec<(String, Vec<bool>)>> {
    sessions
        .iter()
        .map(|s| {
            s.second_half_skips()
                .map(|t| (s.session_id.clone(), t))
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "session {} has no second-half labels",
                        s.session_id
                    ))
                })
        })
        .collect()
}

/// Seeded mini-batch training. Keeps the parameters of the epoch with the best
/// validation mean AA (earliest on ties); `epochs = 0` returns the initialization.
pub fn train<T: Scalar>(
    data: &TrainData<'_>,
    variant: VariantConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Config(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let config = ModelConfig::for_pipeline(data.pipeline, variant)?;
    let mut params = ModelParams::<T>::init(config, cfg.seed);
    let mut adam = new_adam(&params, cfg.adam());
    let layout = data.pipeline.layout();

    let encoded: Vec<EncodedSession> = data
        .train
        .iter()
        .map(|s| data.pipeline.encode_session(s, data.catalog))
        .collect::<Result<_>>()?;
    let valid_batches: Vec<PaddedBatch<T>> = data
        .valid
        .chunks(cfg.batch_size)
        .map(|c| crate::dataset::pad_batch(c, data.pipeline, data.catalog))
        .collect::<Result<_>>()?;
    let valid_truth = truths(data.valid)?;

    let mut meta = TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        ..TrainingMeta::default()
    };
    let mut best: Option<(f64, ModelParams<T>)> = None;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&EncodedSession> = chunk.iter().map(|&i| &encoded[i]).collect();
            let batch = PaddedBatch::from_encoded(&members, layout)?;
            let l = train_step(&mut params, &mut adam, &batch, &cfg.task_weights)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("loss {l} in epoch {epoch}")));
            }
            total += l;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let valid_mean_aa = evaluate_batches(&params, &valid_batches, &valid_truth, cfg.threshold)?;
        log::info!("epoch {epoch}: train loss {train_loss:.5}, valid mean AA {valid_mean_aa:.5}");
        meta.history.push(EpochLog {
            epoch,
            train_loss,
            valid_mean_aa,
        });
        meta.final_loss = Some(train_loss);
        if best.as_ref().is_none_or(|(aa, _)| valid_mean_aa > *aa) {
            meta.best_epoch = epoch;
            meta.best_valid_mean_aa = Some(valid_mean_aa);
            best = Some((valid_mean_aa, params.clone()));
        }
    }
    Ok(Checkpoint {
        params: best.map_or(params, |(_, p)| p),
        pipeline: data.pipeline.clone(),
        embedding: data.embedding.clone(),
        meta,
    })
}

#[cfg(test)]
mod tests;
