//! Wavelet-conditioned diffusion policy mapping wrench windows to planar
//! velocity commands.
//!
//! The ε-network is a stack of pre-norm cross-attention blocks whose queries are
//! the `H` noisy velocity tokens and whose keys/values come from the wavelet
//! approximation pyramid of the force and torque windows. Keys are sampled from
//! a learned diagonal Gaussian during training and set to its mean at inference.

mod attention;
mod ddim;
mod eval;
mod model;
mod network;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

pub use attention::{entropy_weights, multiscale_attention, MultiscaleAttention};
pub use ddim::{ddim_sample, ddim_timesteps, ddim_trace, NoisePredictor};
pub use eval::{evaluate_intent, examples_from_samples, IntentEvaluation};
pub use model::{
    infer_command, initial_draw, IntentCommander, IntentModel, IntentModelConfig, Normalization, WrenchWindow,
    CHECKPOINT_KIND,
};
pub use network::{
    diffusion_loss, encode_condition, kl_divergence, predict_noise, EpsNetConfig, LatentKeySample, LossBreakdown,
    NoiseBatch,
};
pub use schedule::{cosine_schedule, forward_diffuse, NoiseSchedule, COSINE_OFFSET, MAX_BETA};
pub use train::{train_intent, IntentExample, LossRecord, TrainConfig, TrainOutcome};

use crate::autodiff::{AdamError, GraphError};
use crate::wavelet::WaveletError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IntentError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {t} outside 0..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid attention input: {0}")]
    Attention(String),
    #[error("{k} sampling steps exceed {steps} diffusion steps")]
    TooManySamplingSteps { k: usize, steps: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Adam(#[from] AdamError),
}

/// `H × 3` planar command sequence: rows are future frames, columns are
/// `(v_x [m/s], v_y [m/s], ω_z [rad/s])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityWindow {
    rows: Vec<[f64; 3]>,
}

impl VelocityWindow {
    pub fn new(rows: Vec<[f64; 3]>) -> Self {
        Self { rows }
    }

    pub fn zeros(horizon: usize) -> Self {
        Self {
            rows: vec![[0.0; 3]; horizon],
        }
    }

    pub fn from_fn(horizon: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut rows = Vec::with_capacity(horizon);
        for h in 0..horizon {
            rows.push([f(h, 0), f(h, 1), f(h, 2)]);
        }
        Self { rows }
    }

    /// Builds a window from `H·3` row-major values.
    pub fn from_flat(values: &[f64]) -> Self {
        Self {
            rows: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.rows
    }

    pub fn row(&self, h: usize) -> [f64; 3] {
        self.rows[h]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.combine(self, k, 0.0)
    }

    /// `a·self + b·other`
    pub fn combine(&self, other: &Self, a: f64, b: f64) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .zip(&other.rows)
                .map(|(x, y)| std::array::from_fn(|c| a * x[c] + b * y[c]))
                .collect(),
        }
    }
}
