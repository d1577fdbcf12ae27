use super::PpoError;

/// Generalized advantage estimates and returns for one environment's
/// trajectory. `dones[t]` marks transition `t` as terminal; `last_value` is
/// `V` of the state following the final transition.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PpoError::Shape(format!(
            "{} rewards, {} values, {} done flags",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit (population) deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv {
        *a = (*a - mean) / (std + 1e-8);
    }
}
