use serde::{Deserialize, Serialize};

use super::{IntentError, VelocityWindow};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for each `β_t`.
pub const MAX_BETA: f64 = 0.999;

/// Variance schedule indexed so that `alpha_bar[0] = 1` and step `t ∈ 1..=T̂`
/// uses `betas[t − 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Rebuilds a schedule from stored betas (checkpoint loading).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, IntentError> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b <= MAX_BETA)) {
            return Err(IntentError::InvalidSchedule(format!(
                "{} betas, all must lie in (0, {MAX_BETA}]",
                betas.len()
            )));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }
}

/// Cosine schedule: `f(t) = cos²(((t/T̂ + s)/(1 + s))·π/2)`,
/// `β_t = min(1 − f(t)/f(t−1), 0.999)`, `ᾱ_t = Π_{s≤t}(1 − β_s)`.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule, IntentError> {
    if steps < 2 {
        return Err(IntentError::InvalidSchedule(format!(
            "need at least 2 diffusion steps, got {steps}"
        )));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let betas = (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect();
    NoiseSchedule::from_betas(betas)
}

/// `y_t = √ᾱ_t·y + √(1 − ᾱ_t)·ε`
pub fn forward_diffuse(
    y: &VelocityWindow,
    t: usize,
    eps: &VelocityWindow,
    schedule: &NoiseSchedule,
) -> Result<VelocityWindow, IntentError> {
    if t > schedule.steps() {
        return Err(IntentError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    if y.horizon() != eps.horizon() {
        return Err(IntentError::Shape(format!(
            "signal has {} rows, noise has {}",
            y.horizon(),
            eps.horizon()
        )));
    }
    let ab = schedule.alpha_bar(t);
    Ok(y.combine(eps, ab.sqrt(), (1.0 - ab).sqrt()))
}
