//! Planar leader–follower carrying simulator used in place of recorded human
//! demonstrations: scripted leader primitives, spring-damper handles read by
//! two six-axis wrist sensors, follower controllers, and the windowed dataset.

mod dataset;
mod generate;
mod kinematics;
mod log_io;
mod physics;

use serde::{Deserialize, Serialize};

pub use dataset::{
    finite_diff_velocity, read_dataset, window_dataset, write_dataset, SampleMeta, TrainingSample, WindowSpec,
};
pub use generate::{direction_consistency, generate_dataset, generate_trials, GenerationConfig, Trial};
pub use kinematics::{
    leader_state, minjerk_profile, primitive_trajectory, LeaderState, MotionPrimitive, PrimitiveKind,
};
pub use log_io::{read_log, write_log};
pub use physics::{
    coupling_wrench, simulate_dyad, system_energy, wrench_window_at, BodyState, CommandSource, Controller, Coupling,
};

use crate::intent::IntentError;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, thiserror::Error)]
pub enum DyadError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("invalid dyad configuration: {0}")]
    Config(String),
    #[error("simulation unstable at t={t:.3}s: {detail}")]
    Unstable { t: f64, detail: String },
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample spacing {dt} deviates more than 1% from {nominal}")]
    NonUniformTime { dt: f64, nominal: f64 },
    #[error("unsupported file header: {0}")]
    Version(String),
    #[error("malformed record at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("follower command failed: {0}")]
    Command(#[from] IntentError),
}

/// Planar pose `(x [m], y [m], θ [rad])`, serialized as `[x, y, θ]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<[f64; 3]> for Pose {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.theta]
    }
}

impl Pose {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    /// Maps a point from this pose's body frame into the world frame.
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Rotates a world-frame vector into this pose's body frame.
    pub fn to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// Rotates a body-frame vector into the world frame.
    pub fn to_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.theta * self.theta).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Six-axis reading `(F_x, F_y, F_z, τ_x, τ_y, τ_z)` in the sensor frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Wrench(pub [f64; 6]);

impl Wrench {
    pub fn force(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn torque(&self) -> [f64; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }
}

/// Both wrist readings at one sensor tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WrenchTick {
    pub t: f64,
    pub w1: Wrench,
    pub w2: Wrench,
}

/// Poses at one camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub leader: Pose,
    pub follower: Pose,
    /// Object centre of mass.
    pub object: Pose,
}

/// Time-stamped wrench stream plus the lower-rate pose stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DyadLog {
    pub wrench: Vec<WrenchTick>,
    pub frames: Vec<Frame>,
}

/// Physical constants of the dyad. Stiffness and damping are per handle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DyadConfig {
    /// Payload mass [kg].
    pub payload: f64,
    /// Object mass without payload [kg].
    pub object_mass: f64,
    /// Distance from the leader's grip to the follower's handle centre [m].
    pub object_length: f64,
    /// Lateral distance between the follower's two handles [m].
    pub hand_separation: f64,
    /// Translational handle stiffness `K` [N/m].
    pub stiffness: f64,
    /// Translational handle damping `D` [N·s/m].
    pub damping: f64,
    /// Rotational handle stiffness [N·m/rad].
    pub rot_stiffness: f64,
    /// Rotational handle damping [N·m·s/rad].
    pub rot_damping: f64,
    /// Follower body mass [kg]; half the object and payload are added.
    pub follower_mass: f64,
    /// Follower yaw inertia [kg·m²].
    pub follower_inertia: f64,
    /// Demonstrator admittance `A` [m/s per N].
    pub admittance: f64,
    /// Demonstrator rotational admittance [rad/s per N·m].
    pub rot_admittance: f64,
    /// Velocity-tracking gain of a commanded follower [N·s/m]; rotational gain
    /// is this value times the inertia-to-mass ratio.
    pub tracking_gain: f64,
    /// Wrench sample rate [Hz].
    pub wrench_rate: f64,
    /// Wrench ticks per camera frame (`S`).
    pub frame_stride: usize,
    /// Sensor noise std for forces [N].
    pub force_noise: f64,
    /// Sensor noise std for torques [N·m].
    pub torque_noise: f64,
    /// Still time before the primitive starts [s].
    pub pre_roll: f64,
    /// Still time after the primitive ends [s].
    pub settle: f64,
    /// Abort if any pose norm exceeds this.
    pub pose_bound: f64,
}

impl Default for DyadConfig {
    fn default() -> Self {
        Self {
            payload: 0.0,
            object_mass: 2.0,
            object_length: 1.0,
            hand_separation: 0.5,
            stiffness: 500.0,
            damping: 50.0,
            rot_stiffness: 20.0,
            rot_damping: 2.0,
            follower_mass: 5.0,
            follower_inertia: 1.0,
            admittance: 0.02,
            rot_admittance: 0.1,
            tracking_gain: 100.0,
            wrench_rate: 1000.0,
            frame_stride: 33,
            force_noise: 0.1,
            torque_noise: 0.01,
            pre_roll: 0.5,
            settle: 1.0,
            pose_bound: 100.0,
        }
    }
}

/// Payload masses used for data generation [kg].
pub const PAYLOADS: [f64; 4] = [0.0, 1.0, 3.0, 4.0];

impl DyadConfig {
    pub fn validate(&self) -> Result<(), DyadError> {
        let positive = [
            ("object_length", self.object_length),
            ("hand_separation", self.hand_separation),
            ("stiffness", self.stiffness),
            ("rot_stiffness", self.rot_stiffness),
            ("follower_mass", self.follower_mass),
            ("follower_inertia", self.follower_inertia),
            ("admittance", self.admittance),
            ("rot_admittance", self.rot_admittance),
            ("tracking_gain", self.tracking_gain),
            ("wrench_rate", self.wrench_rate),
            ("pose_bound", self.pose_bound),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DyadError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("payload", self.payload),
            ("object_mass", self.object_mass),
            ("damping", self.damping),
            ("rot_damping", self.rot_damping),
            ("force_noise", self.force_noise),
            ("torque_noise", self.torque_noise),
            ("pre_roll", self.pre_roll),
            ("settle", self.settle),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DyadError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.frame_stride == 0 {
            return Err(DyadError::Config("frame_stride must be positive".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.wrench_rate
    }

    pub fn frame_rate(&self) -> f64 {
        self.wrench_rate / self.frame_stride as f64
    }

    /// Static `F_z` share on each wrist.
    pub fn payload_share(&self) -> f64 {
        self.payload * GRAVITY / 2.0
    }

    fn effective_mass(&self) -> f64 {
        self.follower_mass + 0.5 * (self.object_mass + self.payload)
    }
}
