use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyad::Pose;
use crate::rng::substream;

use super::{PpoError, RandomizationConfig};

pub const ACTOR_OBS: usize = 13;
pub const CRITIC_OBS: usize = ACTOR_OBS + 3;

/// Fixed physical constants of the planar body and the reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub episode_steps: u64,
    pub base_mass: f64,
    /// Translational drag per unit friction coefficient [N·s/m].
    pub friction_scale: f64,
    /// Rotational drag per unit friction coefficient [N·m·s/rad].
    pub rot_friction_scale: f64,
    /// Yaw inertia per kilogram of mass [m²].
    pub inertia_per_mass: f64,
    /// Extra drag per newton of payload [s/m].
    pub payload_drag: f64,
    /// Lateral bias per newton of payload, in action units.
    pub payload_bias: f64,
    /// Force per unit action [N].
    pub force_scale: f64,
    /// Torque per unit action [N·m].
    pub torque_scale: f64,
    /// Tracking reward width.
    pub sigma: f64,
    pub max_lin_cmd: f64,
    pub max_ang_cmd: f64,
    /// Gait phase period [s].
    pub gait_period: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            episode_steps: 500,
            base_mass: 10.0,
            friction_scale: 10.0,
            rot_friction_scale: 1.0,
            inertia_per_mass: 0.1,
            payload_drag: 0.25,
            payload_bias: 0.05,
            force_scale: 50.0,
            torque_scale: 10.0,
            sigma: 0.25,
            max_lin_cmd: 0.8,
            max_ang_cmd: 0.5,
            gait_period: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, rand: &RandomizationConfig) -> Result<(), PpoError> {
        rand.validate()?;
        let positive = [
            self.dt,
            self.friction_scale,
            self.rot_friction_scale,
            self.inertia_per_mass,
            self.force_scale,
            self.torque_scale,
            self.sigma,
            self.gait_period,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.episode_steps == 0 {
            return Err(PpoError::Config("environment constants must be positive".into()));
        }
        if !(self.base_mass + rand.added_mass[0] > 0.0) {
            return Err(PpoError::Config(format!(
                "base mass {} with added mass {} is not positive",
                self.base_mass, rand.added_mass[0]
            )));
        }
        if !(rand.friction[0] * self.friction_scale + self.payload_drag * rand.payload[0] > 0.0) {
            return Err(PpoError::Config("lowest friction and payload leave no net drag".into()));
        }
        Ok(())
    }

    fn push_steps(&self, rand: &RandomizationConfig) -> u64 {
        ((rand.push_interval / self.dt).round() as u64).max(1)
    }
}

/// Full simulator state, including the generator driving future pushes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEnvState {
    pub pose: Pose,
    /// World-frame `(ẋ, ẏ, ω_z)`.
    pub velocity: [f64; 3],
    pub base_mass: f64,
    pub added_mass: f64,
    pub friction: f64,
    /// Payload force [N].
    pub payload: f64,
    /// Body-frame `(v_x*, v_y*, ω_z*)`.
    pub command: [f64; 3],
    pub prev_action: [f64; 3],
    pub step: u64,
    /// Gait phase in `[0, 1)`.
    pub phase: f64,
    rng: ChaCha8Rng,
}

impl ToyEnvState {
    pub fn mass(&self) -> f64 {
        self.base_mass + self.added_mass
    }

    /// Body-frame `(v_x, v_y, ω_z)`.
    pub fn body_velocity(&self) -> [f64; 3] {
        let v = self.pose.to_local([self.velocity[0], self.velocity[1]]);
        [v[0], v[1], self.velocity[2]]
    }

    pub fn time(&self, env: &EnvConfig) -> f64 {
        self.step as f64 * env.dt
    }

    /// Planar tracking error `‖v_xy − C_xy‖`.
    pub fn tracking_error(&self) -> f64 {
        let v = self.body_velocity();
        (v[0] - self.command[0]).hypot(v[1] - self.command[1])
    }

    pub fn observe(&self) -> Observation {
        let v = self.body_velocity();
        let (s, c) = self.pose.theta.sin_cos();
        let (ps, pc) = (TAU * self.phase).sin_cos();
        let mut actor = [0.0; ACTOR_OBS];
        actor[..2].copy_from_slice(&[s, c]);
        actor[2..5].copy_from_slice(&self.command);
        actor[5..8].copy_from_slice(&v);
        actor[8..11].copy_from_slice(&self.prev_action);
        actor[11..].copy_from_slice(&[ps, pc]);
        let mut critic = [0.0; CRITIC_OBS];
        critic[..ACTOR_OBS].copy_from_slice(&actor);
        critic[ACTOR_OBS..].copy_from_slice(&[self.friction, self.payload, self.added_mass]);
        Observation { actor, critic }
    }
}

/// Actor inputs `[sin θ, cos θ, C(3), v(3), a_prev(3), sin 2πφ, cos 2πφ]`;
/// the critic appends the true friction, payload force and added mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub actor: [f64; ACTOR_OBS],
    pub critic: [f64; CRITIC_OBS],
}

/// Weighted reward terms; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub lin: f64,
    pub ang: f64,
    pub action_rate: f64,
    pub alive: f64,
    pub total: f64,
}

pub fn compute_reward(
    body_velocity: [f64; 3],
    command: [f64; 3],
    action: [f64; 3],
    prev_action: [f64; 3],
    sigma: f64,
) -> RewardBreakdown {
    let e2 = (body_velocity[0] - command[0]).powi(2) + (body_velocity[1] - command[1]).powi(2);
    let lin = (-e2 / sigma).exp();
    let ang = 0.5 * (-(body_velocity[2] - command[2]).powi(2) / sigma).exp();
    let action_rate = -0.01
        * action
            .iter()
            .zip(&prev_action)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    let alive = 0.15;
    RewardBreakdown {
        lin,
        ang,
        action_rate,
        alive,
        total: lin + ang + action_rate + alive,
    }
}

/// Joint PD law `τ = K_p·(a − a₀) − K_d·ȧ`.
pub fn pd_torque(a: f64, a0: f64, a_dot: f64, kp: f64, kd: f64) -> f64 {
    kp * (a - a0) - kd * a_dot
}

/// Samples friction, added mass, payload and command from `rand`; the same
/// stream then drives the push schedule.
pub fn env_reset(env: &EnvConfig, rand: &RandomizationConfig, seed: u64) -> ToyEnvState {
    let mut rng = substream(seed, "ppo.env", 0);
    let mut uniform = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let friction = uniform(rand.friction);
    let added_mass = uniform(rand.added_mass);
    let payload = uniform(rand.payload);
    let command = [
        uniform([-env.max_lin_cmd, env.max_lin_cmd]),
        uniform([-env.max_lin_cmd, env.max_lin_cmd]),
        uniform([-env.max_ang_cmd, env.max_ang_cmd]),
    ];
    ToyEnvState {
        pose: Pose::default(),
        velocity: [0.0; 3],
        base_mass: env.base_mass,
        added_mass,
        friction,
        payload,
        command,
        prev_action: [0.0; 3],
        step: 0,
        phase: 0.0,
        rng,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    /// Planar tracking error after the step.
    pub tracking_error: f64,
    pub done: bool,
}

/// One semi-implicit Euler step. The action is clamped to `[−1, 1]³` and
/// scaled to a body-frame force and yaw torque. A push lands on every step
/// whose time is a positive multiple of the push interval.
pub fn env_step(
    state: &mut ToyEnvState,
    action: [f64; 3],
    env: &EnvConfig,
    rand: &RandomizationConfig,
) -> Result<StepOutcome, PpoError> {
    let a = action.map(|v| v.clamp(-1.0, 1.0));
    if a.iter().any(|v| v.is_nan()) {
        return Err(PpoError::NonFinite(format!("action {action:?}")));
    }
    let m = state.mass();
    let inertia = env.inertia_per_mass * m;
    let drag = state.friction * env.friction_scale + env.payload_drag * state.payload;
    let body = [
        env.force_scale * a[0],
        env.force_scale * (a[1] + env.payload_bias * state.payload),
    ];
    let f = state.pose.to_world(body);
    for i in 0..2 {
        state.velocity[i] += env.dt * (f[i] - drag * state.velocity[i]) / m;
    }
    let torque = env.torque_scale * a[2] - state.friction * env.rot_friction_scale * state.velocity[2];
    state.velocity[2] += env.dt * torque / inertia;
    state.pose.x += env.dt * state.velocity[0];
    state.pose.y += env.dt * state.velocity[1];
    state.pose.theta += env.dt * state.velocity[2];
    state.step += 1;
    if state.step % env.push_steps(rand) == 0 && rand.max_push > 0.0 {
        for i in 0..2 {
            state.velocity[i] += state.rng.random_range(-rand.max_push..=rand.max_push);
        }
    }
    state.phase = (state.time(env) / env.gait_period).rem_euclid(1.0);
    if !(state.pose.is_finite() && state.velocity.iter().all(|v| v.is_finite())) {
        return Err(PpoError::NonFinite(format!("state at step {}", state.step)));
    }
    let reward = compute_reward(state.body_velocity(), state.command, a, state.prev_action, env.sigma);
    state.prev_action = a;
    Ok(StepOutcome {
        observation: state.observe(),
        reward,
        tracking_error: state.tracking_error(),
        done: state.step >= env.episode_steps,
    })
}
