use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{adamw_step, DenoiserModel, OptimizerState};
use crate::error::{Error, Result};
use crate::schedule::VarianceSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0;
        if !ok {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// σ drawn uniformly from the schedule's discrete levels, plus unit Gaussian
/// noise shaped like each sample.
pub fn draw_training_batch<R: Rng>(
    rng: &mut R,
    schedule: &VarianceSchedule,
    batch: &[&Tensor],
) -> (Vec<f64>, Vec<Tensor>) {
    let mut sigmas = Vec::with_capacity(batch.len());
    let mut noises = Vec::with_capacity(batch.len());
    for x in batch {
        let t = rng.random_range(1..=schedule.num_steps());
        sigmas.push(schedule.sigma_at(t));
        let [c, h, w] = x.shape();
        let data = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        noises.push(Tensor::from_vec(c, h, w, data).expect("noise shape"));
    }
    (sigmas, noises)
}

/// Minimises the denoising loss over `dataset` with AdamW.
///
/// All randomness (batch order, σ levels, noise) comes from one stream seeded
/// by `cfg.seed`, so two runs with the same inputs are bit-identical.
pub fn train(mut model: DenoiserModel, dataset: &[Tensor], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let shape = model.arch().input_shape();
    if let Some(i) = dataset.iter().position(|x| x.shape() != shape) {
        return Err(Error::invalid(format!(
            "sample {i} has shape {:?}, model expects {shape:?}",
            dataset[i].shape()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.param_count());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (sigmas, noises) = draw_training_batch(&mut rng, model.schedule(), &batch);
            let (loss, grad) = model.loss_and_grad(&batch, &sigmas, &noises)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            adamw_step(model.params_mut(), &grad, &mut state, cfg).map_err(|e| match e {
                Error::Numeric { .. } => Error::Training { epoch, loss: f64::NAN },
                other => other,
            })?;
            epoch_sum += loss * batch.len() as f64;
        }
        let mean = epoch_sum / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training { epoch, loss: mean });
        }
        log::info!("epoch {epoch}/{}: loss {mean:.6}", cfg.epochs);
        history.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}
