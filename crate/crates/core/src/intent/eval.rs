use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyad::TrainingSample;
use crate::rng::substream;
use crate::wavelet::{encode_window, ScalingFilter};

use super::model::{initial_draw, IntentModel};
use super::network::EpsNetConfig;
use super::train::IntentExample;
use super::IntentError;

/// Wavelet-encodes windowed samples for training.
pub fn examples_from_samples(
    samples: &[TrainingSample],
    net: &EpsNetConfig,
    filter: ScalingFilter,
) -> Result<Vec<IntentExample>, IntentError> {
    samples
        .iter()
        .map(|s| {
            if s.label.horizon() != net.horizon {
                return Err(IntentError::Shape(format!(
                    "label has {} rows, network predicts {}",
                    s.label.horizon(),
                    net.horizon
                )));
            }
            let (force, torque) = encode_window(
                &s.window.force,
                &s.window.torque,
                net.levels,
                filter,
                net.horizon,
                net.block,
            )?;
            Ok(IntentExample {
                force,
                torque,
                target: s.label.clone(),
            })
        })
        .collect()
}

/// Held-out scores of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentEvaluation {
    pub samples: usize,
    /// Mean squared error of the sampled window over all `H·3` entries.
    pub mse: f64,
    /// Same error for a model that always predicts zero.
    pub zero_mse: f64,
    /// Translation samples counted for sign agreement.
    pub translation_samples: usize,
    /// Fraction of those whose predicted mean velocity has the primitive's
    /// dominant axis and sign.
    pub sign_agreement: f64,
}

impl IntentEvaluation {
    pub fn mse_ratio(&self) -> f64 {
        self.mse / self.zero_mse
    }
}

/// Samples every window with DDIM (draw `i` seeded from `(seed, i)`) and scores
/// it against the label. Sign agreement skips samples whose label mean speed is
/// below `min_speed`.
pub fn evaluate_intent(
    model: &IntentModel,
    samples: &[TrainingSample],
    min_speed: f64,
    seed: u64,
    batch: usize,
) -> Result<IntentEvaluation, IntentError> {
    if samples.is_empty() {
        return Err(IntentError::EmptyBatch);
    }
    let mut sq = 0.0;
    let mut zero = 0.0;
    let mut count = 0usize;
    let mut translation = 0usize;
    let mut agree = 0usize;
    for (c, chunk) in samples.chunks(batch.max(1)).enumerate() {
        let stacks = chunk
            .iter()
            .map(|s| model.encode(&s.window))
            .collect::<Result<Vec<_>, _>>()?;
        let init: Vec<_> = (0..chunk.len())
            .map(|i| {
                let index = (c * batch.max(1) + i) as u64;
                initial_draw(model.config.horizon, substream(seed, "intent.eval", index).random())
            })
            .collect();
        let predictions = model.sample(&stacks, &init)?;
        for (s, y) in chunk.iter().zip(&predictions) {
            for (p, t) in y.flat().iter().zip(s.label.flat()) {
                sq += (p - t).powi(2);
                zero += t * t;
                count += 1;
            }
            let Some((axis, sign)) = s.meta.and_then(|m| m.primitive.dominant_axis()) else {
                continue;
            };
            let label = planar_mean(s.label.rows());
            if label[0].hypot(label[1]) < min_speed {
                continue;
            }
            translation += 1;
            let pred = planar_mean(y.rows());
            let dominant = if pred[0].abs() >= pred[1].abs() { 0 } else { 1 };
            if dominant == axis && pred[axis] * sign > 0.0 {
                agree += 1;
            }
        }
    }
    Ok(IntentEvaluation {
        samples: samples.len(),
        mse: sq / count as f64,
        zero_mse: zero / count as f64,
        translation_samples: translation,
        sign_agreement: if translation == 0 {
            0.0
        } else {
            agree as f64 / translation as f64
        },
    })
}

fn planar_mean(rows: &[[f64; 3]]) -> [f64; 2] {
    let h = rows.len() as f64;
    std::array::from_fn(|c| rows.iter().map(|r| r[c]).sum::<f64>() / h)
}
