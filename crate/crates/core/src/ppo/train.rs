use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::rng::substream;

use super::env::{env_reset, env_step, EnvConfig, Observation, ToyEnvState};
use super::gae::compute_gae;
use super::policy::{policy_forward, ActionMode, GaussianPolicy, PolicyConfig};
use super::update::{ppo_update, Rollout};
use super::{PpoConfig, PpoError, RandomizationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Payload randomized over the configured range.
    Adaptive,
    /// Payload pinned to zero during training.
    Baseline,
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    /// Mean unscaled per-step reward over the rollout.
    pub mean_reward: f64,
    pub tracking_error: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub value_loss: f64,
    pub surrogate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPolicy {
    pub policy: GaussianPolicy,
    pub mode: TrainMode,
    pub curves: Vec<UpdateStats>,
}

struct EnvSlot {
    state: ToyEnvState,
    episodes: ChaCha8Rng,
}

impl EnvSlot {
    fn reset(&mut self, env: &EnvConfig, rand: &RandomizationConfig) {
        self.state = env_reset(env, rand, self.episodes.next_u64());
    }
}

/// Alternates rollouts over `num_envs` independent environments with clipped
/// PPO updates. `on_update` sees each curve row as soon as it exists.
/// Episode ends are time limits, so the final reward is bootstrapped with the
/// critic's value of the last state.
pub fn train_ppo(
    ppo: &PpoConfig,
    env: &EnvConfig,
    rand: &RandomizationConfig,
    policy_config: &PolicyConfig,
    mode: TrainMode,
    seed: u64,
    mut on_update: impl FnMut(&UpdateStats),
) -> Result<TrainedPolicy, PpoError> {
    ppo.validate()?;
    env.validate(rand)?;
    let rand = match mode {
        TrainMode::Adaptive => rand.clone(),
        TrainMode::Baseline => rand.without_payload(),
    };
    let mut policy = GaussianPolicy::new(policy_config.clone(), &mut substream(seed, "ppo.init", 0))?;
    let mut adam = AdamState::new(AdamConfig::default());
    let mut slots: Vec<EnvSlot> = (0..ppo.num_envs as u64)
        .map(|i| {
            let mut episodes = substream(seed, "ppo.envs", i);
            EnvSlot {
                state: env_reset(env, &rand, episodes.next_u64()),
                episodes,
            }
        })
        .collect();
    let mut curves = Vec::with_capacity(ppo.updates);
    for update in 0..ppo.updates {
        let mut noise = substream(seed, "ppo.actions", update as u64);
        let (rollout, mean_reward, tracking_error) = collect(&policy, &mut slots, ppo, env, &rand, &mut noise)
            .map_err(|e| PpoError::Diverged {
                update,
                detail: e.to_string(),
            })?;
        let mut shuffle = substream(seed, "ppo.minibatch", update as u64);
        let s = ppo_update(&mut policy, &mut adam, &rollout, ppo, &mut shuffle).map_err(|e| PpoError::Diverged {
            update,
            detail: e.to_string(),
        })?;
        let row = UpdateStats {
            update,
            mean_reward,
            tracking_error,
            clip_fraction: s.clip_fraction,
            approx_kl: s.approx_kl,
            value_loss: s.value_loss,
            surrogate: s.surrogate,
        };
        on_update(&row);
        curves.push(row);
    }
    Ok(TrainedPolicy { policy, mode, curves })
}

fn collect(
    policy: &GaussianPolicy,
    slots: &mut [EnvSlot],
    ppo: &PpoConfig,
    env: &EnvConfig,
    rand: &RandomizationConfig,
    noise: &mut ChaCha8Rng,
) -> Result<(Rollout, f64, f64), PpoError> {
    let (n, len) = (slots.len(), ppo.rollout_len);
    let mut obs: Vec<Observation> = slots.iter().map(|s| s.state.observe()).collect();
    // Per-env columns, time-major within each env.
    let mut cols: Vec<Rollout> = vec![Rollout::default(); n];
    let mut rewards = vec![Vec::with_capacity(len); n];
    let mut dones = vec![Vec::with_capacity(len); n];
    let (mut reward_sum, mut err_sum) = (0.0, 0.0);
    for _ in 0..len {
        let draws: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(noise)))
            .collect();
        let out = policy_forward(policy, &obs, ActionMode::Sample(&draws))?;
        let mut finished = Vec::new();
        for (i, (slot, o)) in slots.iter_mut().zip(&out).enumerate() {
            let c = &mut cols[i];
            c.actor_obs.push(obs[i].actor);
            c.critic_obs.push(obs[i].critic);
            c.actions.push(o.action);
            c.log_probs.push(o.log_prob);
            c.values.push(o.value);
            let step = env_step(&mut slot.state, o.action, env, rand)?;
            reward_sum += step.reward.total;
            err_sum += step.tracking_error;
            rewards[i].push(ppo.reward_scale * step.reward.total);
            dones[i].push(step.done);
            if step.done {
                finished.push((i, step.observation));
                slot.reset(env, rand);
            }
            obs[i] = slot.state.observe();
        }
        if !finished.is_empty() {
            let last: Vec<Observation> = finished.iter().map(|(_, o)| *o).collect();
            let v = policy_forward(policy, &last, ActionMode::Mean)?;
            for ((i, _), o) in finished.iter().zip(v) {
                *rewards[*i].last_mut().expect("just pushed") += ppo.gamma * o.value;
            }
        }
    }
    let last = policy_forward(policy, &obs, ActionMode::Mean)?;
    let mut rollout = Rollout::default();
    for (i, mut c) in cols.into_iter().enumerate() {
        let (adv, ret) = compute_gae(&rewards[i], &c.values, &dones[i], last[i].value, ppo.gamma, ppo.lambda)?;
        rollout.actor_obs.append(&mut c.actor_obs);
        rollout.critic_obs.append(&mut c.critic_obs);
        rollout.actions.append(&mut c.actions);
        rollout.log_probs.append(&mut c.log_probs);
        rollout.values.append(&mut c.values);
        rollout.advantages.extend(adv);
        rollout.returns.extend(ret);
    }
    let k = (n * len) as f64;
    Ok((rollout, reward_sum / k, err_sum / k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over episodes of the per-step planar tracking error [m/s].
    pub mean_tracking_error: f64,
    pub episode_errors: Vec<f64>,
    pub mean_reward: f64,
}

/// Runs `episodes` full episodes with the deterministic action. Episode `i`
/// draws its randomization from `("ppo.eval", i)`, so two policies evaluated
/// with the same seed face identical conditions.
pub fn evaluate_policy(
    policy: &GaussianPolicy,
    env: &EnvConfig,
    rand: &RandomizationConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport, PpoError> {
    env.validate(rand)?;
    if episodes == 0 {
        return Err(PpoError::Config("need at least one evaluation episode".into()));
    }
    let mut states: Vec<ToyEnvState> = (0..episodes as u64)
        .map(|i| env_reset(env, rand, substream(seed, "ppo.eval", i).random()))
        .collect();
    let mut errors = vec![0.0; episodes];
    let mut reward = 0.0;
    for _ in 0..env.episode_steps {
        let obs: Vec<Observation> = states.iter().map(ToyEnvState::observe).collect();
        let out = policy_forward(policy, &obs, ActionMode::Mean)?;
        for ((s, o), e) in states.iter_mut().zip(&out).zip(errors.iter_mut()) {
            let step = env_step(s, o.action, env, rand)?;
            *e += step.tracking_error;
            reward += step.reward.total;
        }
    }
    let steps = env.episode_steps as f64;
    let episode_errors: Vec<f64> = errors.iter().map(|e| e / steps).collect();
    Ok(EvalReport {
        mean_tracking_error: episode_errors.iter().sum::<f64>() / episodes as f64,
        mean_reward: reward / (steps * episodes as f64),
        episode_errors,
    })
}
