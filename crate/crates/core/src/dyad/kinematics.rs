use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DyadConfig, DyadError, Pose};

/// Minimum-jerk displacement and velocity at time `t` of a move of length `d`
/// lasting `duration`: `s = d·(10u³ − 15u⁴ + 6u⁵)`, `u = t/duration`.
pub fn minjerk_profile(d: f64, duration: f64, t: f64) -> Result<(f64, f64), DyadError> {
    if !(duration > 0.0) {
        return Err(DyadError::InvalidPrimitive(format!(
            "duration {duration} must be positive"
        )));
    }
    if !(0.0..=duration).contains(&t) {
        return Err(DyadError::TimeOutOfRange { t, duration });
    }
    let u = t / duration;
    let u2 = u * u;
    let u3 = u2 * u;
    let s = d * (10.0 * u3 - 15.0 * u3 * u + 6.0 * u3 * u2);
    let v = d / duration * (30.0 * u2 - 60.0 * u3 + 30.0 * u3 * u);
    Ok((s, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Forward,
    Backward,
    Left,
    Right,
    LeaderRotCw,
    LeaderRotCcw,
    FollowerRotCw,
    FollowerRotCcw,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 8] = [
        PrimitiveKind::Forward,
        PrimitiveKind::Backward,
        PrimitiveKind::Left,
        PrimitiveKind::Right,
        PrimitiveKind::LeaderRotCw,
        PrimitiveKind::LeaderRotCcw,
        PrimitiveKind::FollowerRotCw,
        PrimitiveKind::FollowerRotCcw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Forward => "forward",
            PrimitiveKind::Backward => "backward",
            PrimitiveKind::Left => "left",
            PrimitiveKind::Right => "right",
            PrimitiveKind::LeaderRotCw => "leader-rot-cw",
            PrimitiveKind::LeaderRotCcw => "leader-rot-ccw",
            PrimitiveKind::FollowerRotCw => "follower-rot-cw",
            PrimitiveKind::FollowerRotCcw => "follower-rot-ccw",
        }
    }

    pub fn index(self) -> u8 {
        Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn is_translation(self) -> bool {
        matches!(
            self,
            PrimitiveKind::Forward | PrimitiveKind::Backward | PrimitiveKind::Left | PrimitiveKind::Right
        )
    }

    /// Label column and sign a translation should dominate: `(0, +1)` is `+v_x`.
    pub fn dominant_axis(self) -> Option<(usize, f64)> {
        match self {
            PrimitiveKind::Forward => Some((0, 1.0)),
            PrimitiveKind::Backward => Some((0, -1.0)),
            PrimitiveKind::Left => Some((1, 1.0)),
            PrimitiveKind::Right => Some((1, -1.0)),
            _ => None,
        }
    }

    /// Nominal amplitude: 0.6 m for translations, π/4 for rotations, with the
    /// sign of the named direction (counter-clockwise is positive).
    pub fn default_amplitude(self) -> f64 {
        match self {
            PrimitiveKind::Forward | PrimitiveKind::Left => 0.6,
            PrimitiveKind::Backward | PrimitiveKind::Right => -0.6,
            PrimitiveKind::LeaderRotCcw | PrimitiveKind::FollowerRotCcw => PI / 4.0,
            PrimitiveKind::LeaderRotCw | PrimitiveKind::FollowerRotCw => -PI / 4.0,
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = DyadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DyadError::InvalidPrimitive(format!("unknown primitive `{s}`")))
    }
}

/// A scripted leader motion. Amplitude is signed metres for translations and
/// signed radians for rotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub kind: PrimitiveKind,
    pub amplitude: f64,
    pub duration: f64,
}

impl MotionPrimitive {
    pub fn new(kind: PrimitiveKind, amplitude: f64, duration: f64) -> Result<Self, DyadError> {
        if !(duration > 0.0 && duration.is_finite()) || amplitude == 0.0 || !amplitude.is_finite() {
            return Err(DyadError::InvalidPrimitive(format!(
                "{kind}: amplitude {amplitude}, duration {duration}"
            )));
        }
        Ok(Self {
            kind,
            amplitude,
            duration,
        })
    }

    /// Nominal 3 s primitive.
    pub fn nominal(kind: PrimitiveKind) -> Self {
        Self {
            kind,
            amplitude: kind.default_amplitude(),
            duration: 3.0,
        }
    }
}

/// Leader pose and its time derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeaderState {
    pub pose: Pose,
    /// `(ẋ, ẏ, θ̇)` in the world frame.
    pub rate: [f64; 3],
}

/// Leader state at time `t` since the start of the motion (clamped to the
/// primitive's duration). The leader starts at the origin facing `+x`; the
/// follower's handle centre starts at `(−ℓ, 0)`.
pub fn leader_state(p: &MotionPrimitive, config: &DyadConfig, t: f64) -> Result<LeaderState, DyadError> {
    let (s, ds) = minjerk_profile(p.amplitude, p.duration, t.clamp(0.0, p.duration))?;
    let ds = if (0.0..=p.duration).contains(&t) { ds } else { 0.0 };
    let l = config.object_length;
    Ok(match p.kind {
        PrimitiveKind::Forward | PrimitiveKind::Backward => LeaderState {
            pose: Pose::new(s, 0.0, 0.0),
            rate: [ds, 0.0, 0.0],
        },
        PrimitiveKind::Left | PrimitiveKind::Right => LeaderState {
            pose: Pose::new(0.0, s, 0.0),
            rate: [0.0, ds, 0.0],
        },
        PrimitiveKind::LeaderRotCw | PrimitiveKind::LeaderRotCcw => LeaderState {
            pose: Pose::new(0.0, 0.0, s),
            rate: [0.0, 0.0, ds],
        },
        PrimitiveKind::FollowerRotCw | PrimitiveKind::FollowerRotCcw => {
            let (sn, cs) = s.sin_cos();
            LeaderState {
                pose: Pose::new(-l + l * cs, l * sn, s),
                rate: [-l * sn * ds, l * cs * ds, ds],
            }
        }
    })
}

/// Leader pose series sampled every `dt` over the full motion (inclusive).
pub fn primitive_trajectory(p: &MotionPrimitive, config: &DyadConfig, dt: f64) -> Result<Vec<Pose>, DyadError> {
    config.validate()?;
    let n = (p.duration / dt).round() as usize;
    (0..=n)
        .map(|i| leader_state(p, config, (i as f64 * dt).min(p.duration)).map(|s| s.pose))
        .collect()
}
