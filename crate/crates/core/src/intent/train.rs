use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::rng::substream;
use crate::wavelet::{ConditioningStack, ScalingFilter};

use super::model::{IntentModel, Normalization};
use super::network::{loss_and_gradients, EpsNetConfig, NoiseBatch, SKIP_GAIN};
use super::schedule::cosine_schedule;
use super::{IntentError, VelocityWindow};

/// One supervised pair: the wavelet stacks of a wrench window and the
/// velocity window that followed it.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentExample {
    pub force: ConditioningStack,
    pub torque: ConditioningStack,
    pub target: VelocityWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// `T̂`
    pub diffusion_steps: usize,
    /// DDIM steps `K` stored with the model.
    pub sampling_steps: usize,
    /// Fit per-channel normalization on the training set.
    pub normalize: bool,
    /// Floor on each normalization std relative to the largest of its group.
    pub norm_floor: f64,
    /// Filter the stacks were encoded with (kept for inference).
    pub filter: ScalingFilter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            diffusion_steps: 100,
            sampling_steps: 20,
            normalize: true,
            norm_floor: 0.05,
            filter: ScalingFilter::Haar,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub diff: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: IntentModel,
    /// One record per optimizer step.
    pub losses: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Mean `(L_diff, L_KL, L_total)` of each epoch.
    pub fn epoch_means(&self) -> Vec<(f64, f64, f64)> {
        let epochs = self.losses.last().map_or(0, |r| r.epoch + 1);
        (0..epochs)
            .map(|e| {
                let rs: Vec<_> = self.losses.iter().filter(|r| r.epoch == e).collect();
                let n = rs.len().max(1) as f64;
                (
                    rs.iter().map(|r| r.diff).sum::<f64>() / n,
                    rs.iter().map(|r| r.kl).sum::<f64>() / n,
                    rs.iter().map(|r| r.total).sum::<f64>() / n,
                )
            })
            .collect()
    }
}

/// Adam on `L_total` over shuffled mini-batches. Aborts on a non-finite loss.
pub fn train_intent(
    examples: &[IntentExample],
    net: &EpsNetConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, IntentError> {
    net.validate()?;
    if examples.is_empty() {
        return Err(IntentError::EmptyBatch);
    }
    if config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0) {
        return Err(IntentError::Config("epochs, batch_size and lr must be positive".into()));
    }
    if config.sampling_steps == 0 || config.sampling_steps > config.diffusion_steps {
        return Err(IntentError::TooManySamplingSteps {
            k: config.sampling_steps,
            steps: config.diffusion_steps,
        });
    }
    let schedule = cosine_schedule(config.diffusion_steps)?;
    let mut init_rng = substream(config.seed, "intent.init", 0);
    let mut params = net.init_params(&mut init_rng)?;
    let norm = if config.normalize {
        Normalization::fit(examples, config.norm_floor)
    } else {
        Normalization::identity()
    };
    let data: Vec<IntentExample> = examples.iter().map(|e| norm.example(e)).collect();

    let mut adam = AdamState::new(AdamConfig::default());
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = substream(config.seed, "intent.epoch", epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<IntentExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let noise = NoiseBatch::draw(net, batch.len(), config.diffusion_steps, &mut rng);
            let (loss, mut grads) = loss_and_gradients(net, &params, &batch, &schedule, &noise)?;
            grads.remove(SKIP_GAIN);
            if !loss.total.is_finite() {
                return Err(IntentError::Diverged {
                    step,
                    detail: format!("L_diff={} L_KL={}", loss.diff, loss.kl),
                });
            }
            adam_step(&mut params, &grads, &mut adam, config.lr).map_err(|e| IntentError::Diverged {
                step,
                detail: e.to_string(),
            })?;
            losses.push(LossRecord {
                step,
                epoch,
                diff: loss.diff,
                kl: loss.kl,
                total: loss.total,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model: IntentModel {
            config: net.clone(),
            params,
            schedule,
            norm,
            sampling_steps: config.sampling_steps,
            filter: config.filter,
        },
        losses,
    })
}
