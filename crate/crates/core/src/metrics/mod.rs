//! Dyadic co-manipulation metrics: completion time, trajectory deviation,
//! velocity difference and average follower force over the detected
//! motion window, plus report rendering against reference columns.

mod io;
mod report;

use serde::{Deserialize, Serialize};

pub use io::{read_trial_csv, trial_from_log, write_trial_csv};
pub use report::{build_report, table_i_baselines, Baseline, MetricValues, MetricsReport};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid series: {0}")]
    Series(String),
    #[error("total displacement is zero")]
    NoDisplacement,
    #[error("start bound never reached: displacement stays below {frac} of the total")]
    StartNotFound { frac: f64 },
    #[error("end bound never reached: no stretch of {dwell}s at or above {frac} of the total{}", if *strict { " lasting to the end of the record" } else { "" })]
    EndNotFound { frac: f64, dwell: f64, strict: bool },
    #[error("empty integration window [{start}, {end}]")]
    EmptyWindow { start: f64, end: f64 },
    #[error("window [{start}, {end}] outside the record [{first}, {last}]")]
    OutOfRecord {
        start: f64,
        end: f64,
        first: f64,
        last: f64,
    },
    #[error("need at least one trial")]
    NoTrials,
    #[error("malformed CSV at record {record}: {detail}")]
    Csv { record: usize, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dyad(#[from] crate::dyad::DyadError),
}

/// Human and robot positions on shared timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub t: Vec<f64>,
    pub human: Vec<[f64; 3]>,
    pub robot: Vec<[f64; 3]>,
    /// `(human, robot)` velocities; derived by backward differences when absent.
    pub velocities: Option<(Vec<[f64; 3]>, Vec<[f64; 3]>)>,
}

/// Forces at the follower's two wrists.
#[derive(Clone, Debug, PartialEq)]
pub struct WrenchPair {
    pub t: Vec<f64>,
    pub f1: Vec<[f64; 3]>,
    pub f2: Vec<[f64; 3]>,
}

/// Everything one trial's metrics need; `com` shares the trajectory timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trajectory: TrajectoryPair,
    pub wrench: WrenchPair,
    pub com: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub start: f64,
    pub end: f64,
}

impl Bounds {
    pub fn completion_time(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub start_frac: f64,
    pub end_frac: f64,
    /// Seconds the displacement must stay in the end band.
    pub dwell: f64,
    /// Require the end band to hold through the end of the record.
    pub strict: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            start_frac: 0.05,
            end_frac: 0.95,
            dwell: 0.5,
            strict: true,
        }
    }
}

fn check_times(t: &[f64], lens: &[usize]) -> Result<(), MetricsError> {
    if t.len() < 2 {
        return Err(MetricsError::Series(format!(
            "need at least 2 samples, got {}",
            t.len()
        )));
    }
    if let Some(&l) = lens.iter().find(|&&l| l != t.len()) {
        return Err(MetricsError::Series(format!(
            "{} timestamps but a column of {l}",
            t.len()
        )));
    }
    if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricsError::Series(
            "timestamps must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn diff(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Start and end of the cooperative motion from the object's centre of mass.
/// Both bounds are sample times: `start` is the first sample whose
/// displacement from the first sample reaches `start_frac` of the total, `end`
/// the first sample of a run at or above `end_frac` lasting at least `dwell`
/// (in strict mode, the run must also reach the last sample).
pub fn detect_bounds(t: &[f64], com: &[[f64; 3]], config: &MetricsConfig) -> Result<Bounds, MetricsError> {
    check_times(t, &[com.len()])?;
    let origin = com[0];
    let disp: Vec<f64> = com.iter().map(|p| norm(diff(*p, origin))).collect();
    let total = *disp.last().expect("at least two samples");
    if !(total > 0.0) {
        return Err(MetricsError::NoDisplacement);
    }
    let start_thr = config.start_frac * total;
    let start = disp
        .iter()
        .position(|d| *d >= start_thr)
        .map(|i| t[i])
        .ok_or(MetricsError::StartNotFound {
            frac: config.start_frac,
        })?;
    let end_thr = config.end_frac * total;
    let not_found = MetricsError::EndNotFound {
        frac: config.end_frac,
        dwell: config.dwell,
        strict: config.strict,
    };
    let last = t.len() - 1;
    let end = if config.strict {
        let first_in = (0..=last).rev().take_while(|&i| disp[i] >= end_thr).last();
        match first_in {
            Some(i) if t[last] - t[i] >= config.dwell => t[i],
            _ => return Err(not_found),
        }
    } else {
        let mut run_start = None;
        let mut found = None;
        for i in 0..=last {
            if disp[i] >= end_thr {
                let s = *run_start.get_or_insert(i);
                if t[i] - t[s] >= config.dwell {
                    found = Some(t[s]);
                    break;
                }
            } else {
                run_start = None;
            }
        }
        found.ok_or(not_found)?
    };
    Ok(Bounds {
        start,
        end: end.max(start),
    })
}

pub fn completion_time(bounds: &Bounds) -> f64 {
    bounds.completion_time()
}

fn lerp(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [
        a[0] + w * (b[0] - a[0]),
        a[1] + w * (b[1] - a[1]),
        a[2] + w * (b[2] - a[2]),
    ]
}

/// Trapezoidal time-average of `f(columns at t)` over the bounds. Columns are
/// linearly interpolated at window edges that fall between samples.
fn window_average<const K: usize>(
    t: &[f64],
    columns: [&[[f64; 3]]; K],
    bounds: &Bounds,
    f: impl Fn([[f64; 3]; K]) -> f64,
) -> Result<f64, MetricsError> {
    check_times(t, &columns.map(<[_]>::len))?;
    let Bounds { start, end } = *bounds;
    if !(end > start) {
        return Err(MetricsError::EmptyWindow { start, end });
    }
    let (first, last) = (t[0], t[t.len() - 1]);
    if start < first || end > last {
        return Err(MetricsError::OutOfRecord {
            start,
            end,
            first,
            last,
        });
    }
    let at = |tau: f64| -> f64 {
        let k = t.partition_point(|v| *v <= tau);
        if k > 0 && t[k - 1] == tau {
            return f(columns.map(|c| c[k - 1]));
        }
        let (i, j) = (k - 1, k);
        let w = (tau - t[i]) / (t[j] - t[i]);
        f(columns.map(|c| lerp(c[i], c[j], w)))
    };
    let inner = t.partition_point(|v| *v <= start)..t.partition_point(|v| *v < end);
    let mut prev = (start, at(start));
    let mut area = 0.0;
    for i in inner {
        let cur = (t[i], f(columns.map(|c| c[i])));
        area += 0.5 * (cur.0 - prev.0) * (cur.1 + prev.1);
        prev = cur;
    }
    area += 0.5 * (end - prev.0) * (at(end) + prev.1);
    Ok(area / (end - start))
}

/// `(1/T_c)·∫‖x_h − x_r‖ dt`.
pub fn trajectory_deviation(pair: &TrajectoryPair, bounds: &Bounds) -> Result<f64, MetricsError> {
    window_average(&pair.t, [&pair.human, &pair.robot], bounds, |[h, r]| norm(diff(h, r)))
}

/// Backward differences; the first sample copies the second.
pub fn backward_difference(t: &[f64], x: &[[f64; 3]]) -> Result<Vec<[f64; 3]>, MetricsError> {
    check_times(t, &[x.len()])?;
    let mut v: Vec<[f64; 3]> = (1..t.len())
        .map(|i| diff(x[i], x[i - 1]).map(|d| d / (t[i] - t[i - 1])))
        .collect();
    v.insert(0, v[0]);
    Ok(v)
}

/// `(1/T_c)·∫‖ẋ_h − ẋ_r‖ dt`.
pub fn velocity_difference(pair: &TrajectoryPair, bounds: &Bounds) -> Result<f64, MetricsError> {
    let derived;
    let (vh, vr) = match &pair.velocities {
        Some((h, r)) => (h, r),
        None => {
            derived = (
                backward_difference(&pair.t, &pair.human)?,
                backward_difference(&pair.t, &pair.robot)?,
            );
            (&derived.0, &derived.1)
        }
    };
    window_average(&pair.t, [vh, vr], bounds, |[h, r]| norm(diff(h, r)))
}

/// `(1/T_c)·∫(‖f₁‖ + ‖f₂‖) dt`.
pub fn avg_follower_force(wrench: &WrenchPair, bounds: &Bounds) -> Result<f64, MetricsError> {
    window_average(&wrench.t, [&wrench.f1, &wrench.f2], bounds, |[a, b]| norm(a) + norm(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub bounds: Bounds,
    pub values: MetricValues,
}

pub fn evaluate_trial(trial: &Trial, config: &MetricsConfig) -> Result<TrialMetrics, MetricsError> {
    let bounds = detect_bounds(&trial.trajectory.t, &trial.com, config)?;
    Ok(TrialMetrics {
        bounds,
        values: MetricValues {
            completion_time: completion_time(&bounds),
            trajectory_deviation: trajectory_deviation(&trial.trajectory, &bounds)?,
            velocity_difference: velocity_difference(&trial.trajectory, &bounds)?,
            follower_force: avg_follower_force(&trial.wrench, &bounds)?,
        },
    })
}
