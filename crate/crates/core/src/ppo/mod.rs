//! Load-adaptive velocity tracking: a planar rigid body with randomized
//! friction, mass and payload, and a clipped-surrogate PPO learner with an
//! asymmetric actor-critic.

mod env;
mod gae;
mod policy;
mod train;
mod update;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamError, GraphError};
use crate::checkpoint::CheckpointError;

pub use env::{
    compute_reward, env_reset, env_step, pd_torque, EnvConfig, Observation, RewardBreakdown, StepOutcome, ToyEnvState,
    ACTOR_OBS, CRITIC_OBS,
};
pub use gae::{compute_gae, normalize_advantages};
pub use policy::{policy_forward, ActionMode, GaussianPolicy, PolicyConfig, PolicyOutput, CHECKPOINT_KIND};
pub use train::{evaluate_policy, train_ppo, EvalReport, TrainMode, TrainedPolicy, UpdateStats};
pub use update::{clip_fraction, clipped_objective, ppo_update, Rollout, UpdateSummary};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at update {update}: {detail}")]
    Diverged { update: usize, detail: String },
}

/// Learner hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Surrogate and value clip `ε`.
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Remaining minibatch epochs are skipped once the approximate KL exceeds this.
    pub kl_target: f64,
    pub value_clip: bool,
    pub num_envs: usize,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub updates: usize,
    /// Multiplier applied to environment rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.998,
            lambda: 0.95,
            value_coef: 1.0,
            entropy_coef: 0.0,
            lr: 1e-3,
            max_grad_norm: 1.0,
            kl_target: 0.01,
            value_clip: true,
            num_envs: 64,
            rollout_len: 256,
            epochs: 5,
            minibatches: 4,
            updates: 1000,
            reward_scale: 0.02,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: String| Err(PpoError::Config(m));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip {} must lie in (0, 1)", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} must lie in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} must lie in [0, 1]", self.lambda));
        }
        if !(self.lr > 0.0 && self.max_grad_norm > 0.0 && self.kl_target > 0.0 && self.reward_scale > 0.0) {
            return bad("lr, max_grad_norm, kl_target and reward_scale must be positive".into());
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("loss coefficients must be non-negative".into());
        }
        if self.num_envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("num_envs, rollout_len, epochs and minibatches must be positive".into());
        }
        if self.minibatches > self.num_envs * self.rollout_len {
            return bad("more minibatches than samples".into());
        }
        Ok(())
    }
}

/// Per-episode domain randomization ranges, sampled uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationConfig {
    pub friction: [f64; 2],
    /// Added base mass [kg].
    pub added_mass: [f64; 2],
    /// Seconds between pushes.
    pub push_interval: f64,
    /// Per-axis push velocity bound [m/s].
    pub max_push: f64,
    /// Payload force [N]; positive loads, negative assists.
    pub payload: [f64; 2],
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            friction: [0.1, 1.25],
            added_mass: [-1.0, 3.0],
            push_interval: 5.0,
            max_push: 1.5,
            payload: [-3.0, 15.0],
        }
    }
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        for (name, [lo, hi]) in [
            ("friction", self.friction),
            ("added_mass", self.added_mass),
            ("payload", self.payload),
        ] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(PpoError::Config(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        if !(self.friction[0] >= 0.0) {
            return Err(PpoError::Config("friction must be non-negative".into()));
        }
        if !(self.push_interval > 0.0 && self.max_push >= 0.0) {
            return Err(PpoError::Config(
                "push interval must be positive and max push non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Same ranges with the payload pinned to zero.
    pub fn without_payload(&self) -> Self {
        Self {
            payload: [0.0, 0.0],
            ..self.clone()
        }
    }

    /// Same ranges with the payload pinned to `force`.
    pub fn with_payload(&self, force: f64) -> Self {
        Self {
            payload: [force, force],
            ..self.clone()
        }
    }
}
