use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::intent::{IntentError, WrenchWindow};
use crate::wavelet::ForceTorqueSequence;

use super::kinematics::{leader_state, MotionPrimitive};
use super::{wrap_angle, DyadConfig, DyadError, DyadLog, Frame, Pose, Wrench, WrenchTick};

/// Pose plus world-frame rate `(ẋ, ẏ, θ̇)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BodyState {
    pub pose: Pose,
    pub rate: [f64; 3],
}

impl BodyState {
    /// World position and velocity of a body-fixed point.
    fn point(&self, local: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let p = self.pose.transform(local);
        let r = [p[0] - self.pose.x, p[1] - self.pose.y];
        let w = self.rate[2];
        (p, [self.rate[0] - w * r[1], self.rate[1] + w * r[0]])
    }
}

/// Spring-damper wrenches of one tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coupling {
    /// Sensor-frame readings of the two follower wrists (noise free).
    pub sensors: [Wrench; 2],
    /// World-frame `(F_x, F_y, τ_z)` each handle applies to the follower.
    pub on_follower: [[f64; 3]; 2],
    /// World-frame `(F_x, F_y, τ_z)` each handle applies to the object.
    pub on_object: [[f64; 3]; 2],
    /// Net world force and yaw moment on the follower about its centre.
    pub net: [f64; 3],
}

fn handle_offsets(config: &DyadConfig) -> [f64; 2] {
    [0.5 * config.hand_separation, -0.5 * config.hand_separation]
}

fn spring(k: f64, d: f64, from: [f64; 2], from_v: [f64; 2], to: [f64; 2], to_v: [f64; 2]) -> [f64; 2] {
    [
        k * (to[0] - from[0]) + d * (to_v[0] - from_v[0]),
        k * (to[1] - from[1]) + d * (to_v[1] - from_v[1]),
    ]
}

/// Handle coupling between the object (rigidly held by the leader) and the
/// follower's two wrists.
///
/// Handle `i` joins the object point `(−ℓ, c_i)` in the leader frame to the wrist
/// point `(0, c_i)` in the follower frame, `c = ±w/2`. Each wrist reads
/// `F = K·δ + D·δ̇` rotated into the follower frame, `F_z = m_payload·g/2`, and
/// `τ_z = K_rot·Δθ + D_rot·Δθ̇`; `τ_x = τ_y = 0`.
pub fn coupling_wrench(leader: &BodyState, follower: &BodyState, config: &DyadConfig) -> Coupling {
    let (k, d) = (config.stiffness, config.damping);
    let dtheta = wrap_angle(leader.pose.theta - follower.pose.theta);
    let tau = config.rot_stiffness * dtheta + config.rot_damping * (leader.rate[2] - follower.rate[2]);
    let mut out = Coupling {
        sensors: [Wrench::default(); 2],
        on_follower: [[0.0; 3]; 2],
        on_object: [[0.0; 3]; 2],
        net: [0.0; 3],
    };
    for (i, c) in handle_offsets(config).into_iter().enumerate() {
        let (grip, grip_v) = leader.point([-config.object_length, c]);
        let (hand, hand_v) = follower.point([0.0, c]);
        let f = spring(k, d, hand, hand_v, grip, grip_v);
        let g = spring(k, d, grip, grip_v, hand, hand_v);
        let local = follower.pose.to_local(f);
        out.sensors[i] = Wrench([local[0], local[1], config.payload_share(), 0.0, 0.0, tau]);
        out.on_follower[i] = [f[0], f[1], tau];
        out.on_object[i] = [g[0], g[1], -tau];
        let r = [hand[0] - follower.pose.x, hand[1] - follower.pose.y];
        out.net[0] += f[0];
        out.net[1] += f[1];
        out.net[2] += tau + r[0] * f[1] - r[1] * f[0];
    }
    out
}

/// Spring potential plus follower kinetic energy.
pub fn system_energy(leader: &BodyState, follower: &BodyState, config: &DyadConfig) -> f64 {
    let m = config.effective_mass();
    let kinetic = 0.5 * m * (follower.rate[0].powi(2) + follower.rate[1].powi(2))
        + 0.5 * config.follower_inertia * follower.rate[2].powi(2);
    let dtheta = wrap_angle(leader.pose.theta - follower.pose.theta);
    let mut potential = 0.0;
    for c in handle_offsets(config) {
        let grip = leader.pose.transform([-config.object_length, c]);
        let hand = follower.pose.transform([0.0, c]);
        potential += 0.5 * config.stiffness * ((grip[0] - hand[0]).powi(2) + (grip[1] - hand[1]).powi(2));
        potential += 0.5 * config.rot_stiffness * dtheta * dtheta;
    }
    kinetic + potential
}

/// Supplies velocity commands `(v_x, v_y, ω_z)` in the follower frame from the
/// most recent wrench window.
pub trait CommandSource {
    /// Wrench samples per window.
    fn window_len(&self) -> usize;
    fn command(&mut self, window: &WrenchWindow, frame: usize) -> Result<[f64; 3], IntentError>;
}

/// How the follower moves.
pub enum Controller<'a> {
    /// Demonstrator: `M·v̇ = F − v/A` (and the rotational analogue).
    Admittance,
    /// Follower pose rigidly tied to the object; no handle stretch.
    Slaved,
    /// Follower never moves.
    Frozen,
    /// `M·v̇ = B·(v_cmd − v)`, command refreshed every frame.
    Learned(&'a mut dyn CommandSource),
}

fn slaved(leader: &BodyState, config: &DyadConfig) -> BodyState {
    let (p, v) = leader.point([-config.object_length, 0.0]);
    BodyState {
        pose: Pose::new(p[0], p[1], leader.pose.theta),
        rate: [v[0], v[1], leader.rate[2]],
    }
}

fn window_from(ticks: &[WrenchTick]) -> WrenchWindow {
    let rows = |f: &dyn Fn(&Wrench) -> [f64; 3]| {
        ForceTorqueSequence::new(
            ticks
                .iter()
                .map(|t| {
                    let (a, b) = (f(&t.w1), f(&t.w2));
                    [a[0], a[1], a[2], b[0], b[1], b[2]]
                })
                .collect(),
        )
    };
    WrenchWindow {
        force: rows(&|w| w.force()),
        torque: rows(&|w| w.torque()),
    }
}

/// The `len` wrench ticks ending at the last tick not after `t`, or `None`
/// when fewer than `len` ticks precede it.
pub fn wrench_window_at(log: &DyadLog, t: f64, len: usize) -> Option<WrenchWindow> {
    let end = log.wrench.partition_point(|w| w.t <= t + 1e-9);
    (len > 0 && end >= len).then(|| window_from(&log.wrench[end - len..end]))
}

/// Runs one trial: pre-roll, the primitive, then settling.
///
/// Semi-implicit Euler at the wrench rate with the follower's velocity damping
/// treated implicitly. Every tick logs both (noisy) wrist wrenches; every
/// `frame_stride` ticks logs the poses.
pub fn simulate_dyad(
    primitive: &MotionPrimitive,
    controller: Controller<'_>,
    config: &DyadConfig,
    seed: u64,
) -> Result<DyadLog, DyadError> {
    config.validate()?;
    let mut controller = controller;
    let dt = config.dt();
    let total = config.pre_roll + primitive.duration + config.settle;
    let ticks = (total * config.wrench_rate).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |sigma: f64| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    };
    let m = config.effective_mass();
    let j = config.follower_inertia;
    let start = leader_state(primitive, config, 0.0)?;
    let mut follower = slaved(
        &BodyState {
            pose: start.pose,
            rate: [0.0; 3],
        },
        config,
    );
    let mut log = DyadLog {
        wrench: Vec::with_capacity(ticks),
        frames: Vec::with_capacity(ticks / config.frame_stride + 1),
    };
    let mut command = [0.0; 3];
    for n in 0..ticks {
        let t = n as f64 * dt;
        let ls = leader_state(primitive, config, t - config.pre_roll)?;
        let leader = BodyState {
            pose: ls.pose,
            rate: ls.rate,
        };
        if matches!(controller, Controller::Slaved) {
            follower = slaved(&leader, config);
        }
        if !follower.pose.is_finite() || follower.pose.norm() > config.pose_bound {
            return Err(DyadError::Unstable {
                t,
                detail: format!("follower pose {:?}", follower.pose),
            });
        }
        let c = coupling_wrench(&leader, &follower, config);
        let mut sensed = c.sensors;
        for w in &mut sensed {
            for (i, v) in w.0.iter_mut().enumerate() {
                *v += noise(if i < 3 { config.force_noise } else { config.torque_noise });
            }
        }
        log.wrench.push(WrenchTick {
            t,
            w1: sensed[0],
            w2: sensed[1],
        });
        if n % config.frame_stride == 0 {
            let frame = log.frames.len();
            let com = leader.pose.transform([-0.5 * config.object_length, 0.0]);
            log.frames.push(Frame {
                t,
                leader: leader.pose,
                follower: follower.pose,
                object: Pose::new(com[0], com[1], leader.pose.theta),
            });
            if let Controller::Learned(source) = &mut controller {
                let need = source.window_len();
                if log.wrench.len() >= need {
                    let window = window_from(&log.wrench[log.wrench.len() - need..]);
                    command = source.command(&window, frame)?;
                }
            }
        }
        match &controller {
            Controller::Slaved | Controller::Frozen => {}
            Controller::Admittance => {
                let b = 1.0 / config.admittance;
                let br = 1.0 / config.rot_admittance;
                for a in 0..2 {
                    follower.rate[a] = (m * follower.rate[a] + dt * c.net[a]) / (m + dt * b);
                }
                follower.rate[2] = (j * follower.rate[2] + dt * c.net[2]) / (j + dt * br);
            }
            Controller::Learned(_) => {
                let b = config.tracking_gain;
                let br = b * j / m;
                let v = follower.pose.to_world([command[0], command[1]]);
                for a in 0..2 {
                    follower.rate[a] = (m * follower.rate[a] + dt * b * v[a]) / (m + dt * b);
                }
                follower.rate[2] = (j * follower.rate[2] + dt * br * command[2]) / (j + dt * br);
            }
        }
        if !matches!(controller, Controller::Slaved | Controller::Frozen) {
            follower.pose.x += dt * follower.rate[0];
            follower.pose.y += dt * follower.rate[1];
            follower.pose.theta += dt * follower.rate[2];
        }
    }
    Ok(log)
}
