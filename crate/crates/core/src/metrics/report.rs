use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{MetricsError, TrialMetrics};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    /// `T_c` [s]
    pub completion_time: f64,
    /// `Δ_traj` [m]
    pub trajectory_deviation: f64,
    /// `Δ_v` [m/s]
    pub velocity_difference: f64,
    /// `F̄` [N]
    pub follower_force: f64,
}

impl MetricValues {
    fn get(&self, i: usize) -> f64 {
        [
            self.completion_time,
            self.trajectory_deviation,
            self.velocity_difference,
            self.follower_force,
        ][i]
    }

    fn from_fn(f: impl Fn(usize) -> f64) -> Self {
        Self {
            completion_time: f(0),
            trajectory_deviation: f(1),
            velocity_difference: f(2),
            follower_force: f(3),
        }
    }
}

/// A reference column (means only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub values: MetricValues,
}

/// Human–human and human–humanoid reference means from the published comparison.
pub fn table_i_baselines() -> Vec<Baseline> {
    vec![
        Baseline {
            name: "Human–Human".into(),
            values: MetricValues {
                completion_time: 23.78,
                trajectory_deviation: 0.1109,
                velocity_difference: 0.165,
                follower_force: 17.355,
            },
        },
        Baseline {
            name: "Human–Humanoid".into(),
            values: MetricValues {
                completion_time: 51.47,
                trajectory_deviation: 0.1294,
                velocity_difference: 0.143,
                follower_force: 16.230,
            },
        },
    ]
}

const ROWS: [(&str, usize); 4] = [
    ("Completion Time T_c (s) ↓", 2),
    ("Trajectory Deviation Δ_traj (m) ↓", 4),
    ("Velocity Difference Δ_v (m/s) ↓", 3),
    ("Average Follower Force F̄ (N) ↓", 3),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub trials: Vec<TrialMetrics>,
    pub mean: MetricValues,
    /// Sample standard deviation across trials; absent for a single trial.
    pub std: Option<MetricValues>,
    pub baselines: Vec<Baseline>,
}

/// Aggregates trials under `label` next to the reference columns.
pub fn build_report(
    label: &str,
    trials: &[TrialMetrics],
    baselines: &[Baseline],
) -> Result<MetricsReport, MetricsError> {
    if trials.is_empty() {
        return Err(MetricsError::NoTrials);
    }
    let n = trials.len() as f64;
    let mean = MetricValues::from_fn(|i| trials.iter().map(|t| t.values.get(i)).sum::<f64>() / n);
    let std = (trials.len() >= 2).then(|| {
        MetricValues::from_fn(|i| {
            let m = mean.get(i);
            (trials.iter().map(|t| (t.values.get(i) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
    });
    Ok(MetricsReport {
        label: label.into(),
        trials: trials.to_vec(),
        mean,
        std,
        baselines: baselines.to_vec(),
    })
}

impl MetricsReport {
    /// Plain-text table with one row per metric; lower is better throughout.
    pub fn render(&self) -> String {
        let mut header = vec!["Metric".to_string(), self.label.clone()];
        header.extend(self.baselines.iter().map(|b| b.name.clone()));
        let mut rows = vec![header];
        for (i, (name, digits)) in ROWS.iter().enumerate() {
            let mut cell = format!("{:.*}", digits, self.mean.get(i));
            if let Some(s) = &self.std {
                write!(cell, " ± {:.*}", digits, s.get(i)).expect("string write");
            }
            let mut row = vec![name.to_string(), cell];
            row.extend(self.baselines.iter().map(|b| format!("{:.*}", digits, b.values.get(i))));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            writeln!(out, "{}", cells.join(" | ").trim_end()).expect("string write");
            if k == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                writeln!(out, "{}", rule.join("-+-")).expect("string write");
            }
        }
        out
    }
}
