use std::path::Path;

use crate::dyad::DyadLog;

use super::{MetricsError, TrajectoryPair, Trial, WrenchPair};

const HEADER: [&str; 13] = [
    "t", "xh_x", "xh_y", "xh_z", "xr_x", "xr_y", "xr_z", "f1_x", "f1_y", "f1_z", "f2_x", "f2_y", "f2_z",
];

fn triple(row: &[f64], at: usize) -> [f64; 3] {
    [row[at], row[at + 1], row[at + 2]]
}

/// Reads `t, x_h(3), x_r(3), f1(3), f2(3)` rows; a non-numeric first row is
/// taken as a header. The object centre of mass is the midpoint of `x_h` and `x_r`.
pub fn read_trial_csv(path: &Path) -> Result<Trial, MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MetricsError::Csv {
            record: 0,
            detail: e.to_string(),
        })?;
    let mut rows: Vec<[f64; 13]> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MetricsError::Csv {
            record: k + 1,
            detail: e.to_string(),
        })?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Err(_) if k == 0 => continue,
            Err(e) => {
                return Err(MetricsError::Csv {
                    record: k + 1,
                    detail: e.to_string(),
                })
            }
            Ok(v) if v.len() != 13 => {
                return Err(MetricsError::Csv {
                    record: k + 1,
                    detail: format!("expected 13 fields, got {}", v.len()),
                })
            }
            Ok(v) => rows.push(v.try_into().expect("length checked")),
        }
    }
    let t: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let human: Vec<[f64; 3]> = rows.iter().map(|r| triple(r, 1)).collect();
    let robot: Vec<[f64; 3]> = rows.iter().map(|r| triple(r, 4)).collect();
    let com = human
        .iter()
        .zip(&robot)
        .map(|(h, r)| std::array::from_fn(|i| 0.5 * (h[i] + r[i])))
        .collect();
    Ok(Trial {
        wrench: WrenchPair {
            t: t.clone(),
            f1: rows.iter().map(|r| triple(r, 7)).collect(),
            f2: rows.iter().map(|r| triple(r, 10)).collect(),
        },
        trajectory: TrajectoryPair {
            t,
            human,
            robot,
            velocities: None,
        },
        com,
    })
}

/// Writes the CSV layout read by [`read_trial_csv`], with a header. Wrench
/// samples must share the trajectory timestamps.
pub fn write_trial_csv(path: &Path, trial: &Trial) -> Result<(), MetricsError> {
    let tr = &trial.trajectory;
    if trial.wrench.t != tr.t {
        return Err(MetricsError::Series(
            "CSV needs wrench and trajectory on the same timestamps".into(),
        ));
    }
    let io = |e: csv::Error| MetricsError::Csv {
        record: 0,
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(HEADER).map_err(io)?;
    for i in 0..tr.t.len() {
        let mut row = vec![tr.t[i]];
        for col in [&tr.human, &tr.robot, &trial.wrench.f1, &trial.wrench.f2] {
            row.extend(col[i]);
        }
        w.write_record(row.iter().map(f64::to_string)).map_err(io)?;
    }
    w.flush().map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Metrics inputs from a simulated dyad. The human reference is where the
/// follower's handle centre would be if the object were rigid in the
/// leader's grip; the robot is the follower itself. Planar positions get `z = 0`.
pub fn trial_from_log(log: &DyadLog, object_length: f64) -> Result<Trial, MetricsError> {
    let lift = |p: [f64; 2]| [p[0], p[1], 0.0];
    let t: Vec<f64> = log.frames.iter().map(|f| f.t).collect();
    Ok(Trial {
        trajectory: TrajectoryPair {
            t,
            human: log
                .frames
                .iter()
                .map(|f| lift(f.leader.transform([-object_length, 0.0])))
                .collect(),
            robot: log.frames.iter().map(|f| [f.follower.x, f.follower.y, 0.0]).collect(),
            velocities: None,
        },
        wrench: WrenchPair {
            t: log.wrench.iter().map(|w| w.t).collect(),
            f1: log.wrench.iter().map(|w| w.w1.force()).collect(),
            f2: log.wrench.iter().map(|w| w.w2.force()).collect(),
        },
        com: log.frames.iter().map(|f| [f.object.x, f.object.y, 0.0]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyad::{simulate_dyad, Controller, DyadConfig, MotionPrimitive, PrimitiveKind};
    use crate::metrics::{evaluate_trial, MetricsConfig};

    fn offset_trial() -> Trial {
        let t: Vec<f64> = (0..=120).map(|i| i as f64 / 10.0).collect();
        let human: Vec<[f64; 3]> = t.iter().map(|v| [(v / 10.0).min(1.0), 0.0, 0.0]).collect();
        let robot = human.iter().map(|p| [p[0], p[1] + 0.1, p[2]]).collect();
        let n = t.len();
        let com = human.iter().map(|p| [p[0], 0.05, 0.0]).collect();
        Trial {
            wrench: WrenchPair {
                t: t.clone(),
                f1: vec![[3.0, 4.0, 0.0]; n],
                f2: vec![[0.0, 0.0, 5.0]; n],
            },
            trajectory: TrajectoryPair {
                t,
                human,
                robot,
                velocities: None,
            },
            com,
        }
    }

    #[test]
    fn csv_round_trip_and_constant_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trial.csv");
        let trial = offset_trial();
        write_trial_csv(&path, &trial).unwrap();
        let back = read_trial_csv(&path).unwrap();
        assert_eq!(back, trial);
        let m = evaluate_trial(&back, &MetricsConfig::default()).unwrap();
        assert!((m.values.trajectory_deviation - 0.1).abs() < 1e-12);
        assert_eq!(m.values.velocity_difference, 0.0);
        assert!((m.values.follower_force - 10.0).abs() < 1e-12);
        assert_eq!(m.values.completion_time, 9.0);
    }

    #[test]
    fn bad_csv_reports_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "t,a\n0,1,2,3,4,5,6,7,8,9,10,11,12\n1,2,x,4,5,6,7,8,9,10,11,12,13\n",
        )
        .unwrap();
        assert!(matches!(
            read_trial_csv(&path),
            Err(MetricsError::Csv { record: 3, .. })
        ));
    }

    #[test]
    fn admittance_follower_metrics_are_sane() {
        let c = DyadConfig {
            settle: 2.0,
            ..DyadConfig::default()
        };
        let log = simulate_dyad(
            &MotionPrimitive::nominal(PrimitiveKind::Forward),
            Controller::Admittance,
            &c,
            0,
        )
        .unwrap();
        let m = evaluate_trial(
            &trial_from_log(&log, c.object_length).unwrap(),
            &MetricsConfig::default(),
        )
        .unwrap();
        let v = m.values;
        assert!(v.completion_time > 1.0 && v.completion_time < 5.0, "{v:?}");
        assert!(v.trajectory_deviation > 0.0 && v.trajectory_deviation < 0.2, "{v:?}");
        assert!(v.velocity_difference < 0.5 && v.follower_force > 0.0, "{v:?}");
    }
}
