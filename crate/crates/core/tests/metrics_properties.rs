use comanip::metrics::{
    avg_follower_force, detect_bounds, evaluate_trial, trajectory_deviation, velocity_difference, Bounds,
    MetricsConfig, TrajectoryPair, Trial, WrenchPair,
};
use proptest::prelude::*;

fn human(t: f64) -> [f64; 3] {
    [t.sin(), (0.5 * t).cos(), 0.1 * t]
}
fn robot(t: f64) -> [f64; 3] {
    let h = human(t);
    [h[0] + 0.1 * (2.0 * t).sin(), h[1] + 0.05 * t.cos(), h[2] + 0.02]
}
fn human_v(t: f64) -> [f64; 3] {
    [t.cos(), -0.5 * (0.5 * t).sin(), 0.1]
}
fn robot_v(t: f64) -> [f64; 3] {
    let h = human_v(t);
    [h[0] + 0.2 * (2.0 * t).cos(), h[1] - 0.05 * t.sin(), h[2]]
}
fn f1(t: f64) -> [f64; 3] {
    [5.0 + t.sin(), (3.0 * t).cos(), 0.5]
}
fn f2(t: f64) -> [f64; 3] {
    [-2.0, 4.0 + 0.5 * (0.7 * t).sin(), 9.81]
}
fn com(t: f64) -> [f64; 3] {
    [(t / 10.0).clamp(0.0, 1.0), 0.0, 0.0]
}
fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Smooth trial on `[0, 12]` s sampled every `1/rate` seconds.
fn smooth_trial(rate: usize) -> Trial {
    let t: Vec<f64> = (0..=12 * rate).map(|i| i as f64 / rate as f64).collect();
    let map = |f: fn(f64) -> [f64; 3]| t.iter().map(|v| f(*v)).collect::<Vec<_>>();
    Trial {
        trajectory: TrajectoryPair {
            t: t.clone(),
            human: map(human),
            robot: map(robot),
            velocities: Some((map(human_v), map(robot_v))),
        },
        wrench: WrenchPair {
            t: t.clone(),
            f1: map(f1),
            f2: map(f2),
        },
        com: map(com),
    }
}

fn midpoint_mean(b: Bounds, steps_per_s: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = ((b.end - b.start) * steps_per_s as f64).round() as usize;
    let h = (b.end - b.start) / n as f64;
    (0..n).map(|i| f(b.start + (i as f64 + 0.5) * h)).sum::<f64>() * h / (b.end - b.start)
}

#[test]
fn trapezoid_matches_oversampled_oracle() {
    let cfg = MetricsConfig::default();
    let m = evaluate_trial(&smooth_trial(1000), &cfg).unwrap();
    let fine = smooth_trial(10_000);
    let b = detect_bounds(&fine.trajectory.t, &fine.com, &cfg).unwrap();
    assert_eq!((b.start, b.end), (0.5, 9.5));
    assert_eq!(m.values.completion_time, b.end - b.start);
    let dtraj = midpoint_mean(b, 10_000, |t| norm(sub(human(t), robot(t))));
    let dv = midpoint_mean(b, 10_000, |t| norm(sub(human_v(t), robot_v(t))));
    let force = midpoint_mean(b, 10_000, |t| norm(f1(t)) + norm(f2(t)));
    assert!((m.values.trajectory_deviation - dtraj).abs() < 1e-6);
    assert!((m.values.velocity_difference - dv).abs() < 1e-6);
    assert!((m.values.follower_force - force).abs() < 1e-6);
}

fn transform(trial: &Trial, shift: f64, angle: f64, offset: [f64; 3]) -> Trial {
    let (s, c) = angle.sin_cos();
    let rot = |p: &[f64; 3]| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    let place = |v: &Vec<[f64; 3]>| {
        v.iter()
            .map(|p| {
                let r = rot(p);
                [r[0] + offset[0], r[1] + offset[1], r[2] + offset[2]]
            })
            .collect::<Vec<_>>()
    };
    let turn = |v: &Vec<[f64; 3]>| v.iter().map(rot).collect::<Vec<_>>();
    let tr = &trial.trajectory;
    let t: Vec<f64> = tr.t.iter().map(|v| v + shift).collect();
    Trial {
        trajectory: TrajectoryPair {
            t: t.clone(),
            human: place(&tr.human),
            robot: place(&tr.robot),
            velocities: tr.velocities.as_ref().map(|(h, r)| (turn(h), turn(r))),
        },
        wrench: WrenchPair {
            t,
            f1: trial.wrench.f1.clone(),
            f2: trial.wrench.f2.clone(),
        },
        com: place(&trial.com),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn invariant_under_time_shift_and_rigid_motion(
        shift in -50.0f64..50.0,
        angle in -3.2f64..3.2,
        offset in prop::array::uniform3(-5.0f64..5.0),
        derive in any::<bool>(),
    ) {
        let mut base = smooth_trial(100);
        if derive {
            base.trajectory.velocities = None;
        }
        // Keep the thresholds between samples so rounding cannot move a bound.
        for (c, t) in base.com.iter_mut().zip(&base.trajectory.t) {
            c[0] = ((t - 0.0037) / 10.0).clamp(0.0, 1.0);
        }
        let cfg = MetricsConfig::default();
        let a = evaluate_trial(&base, &cfg).unwrap().values;
        let b = evaluate_trial(&transform(&base, shift, angle, offset), &cfg).unwrap().values;
        prop_assert!((a.completion_time - b.completion_time).abs() < 1e-9);
        prop_assert!((a.trajectory_deviation - b.trajectory_deviation).abs() < 1e-9);
        prop_assert!((a.velocity_difference - b.velocity_difference).abs() < 1e-7);
        prop_assert!((a.follower_force - b.follower_force).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_non_negative_and_self_deviation_is_zero(
        amp in 0.0f64..2.0,
        start in 0.5f64..4.0,
        len in 0.1f64..6.0,
    ) {
        let mut trial = smooth_trial(100);
        for (p, t) in trial.trajectory.robot.iter_mut().zip(&trial.trajectory.t) {
            p[0] += amp * (3.0 * t).sin();
        }
        let b = Bounds { start, end: start + len };
        prop_assert!(trajectory_deviation(&trial.trajectory, &b).unwrap() >= 0.0);
        prop_assert!(velocity_difference(&trial.trajectory, &b).unwrap() >= 0.0);
        prop_assert!(avg_follower_force(&trial.wrench, &b).unwrap() >= 0.0);
        let same = TrajectoryPair { robot: trial.trajectory.human.clone(), ..trial.trajectory.clone() };
        prop_assert_eq!(trajectory_deviation(&same, &b).unwrap(), 0.0);
    }
}
