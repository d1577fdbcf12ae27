use super::schedule::NoiseSchedule;
use super::{IntentError, VelocityWindow};

/// Batched noise prediction `ε_θ(y_t, t)` with the condition already bound.
pub trait NoisePredictor {
    fn predict(&mut self, y_t: &[VelocityWindow], t: usize) -> Result<Vec<VelocityWindow>, IntentError>;
}

impl<F> NoisePredictor for F
where
    F: FnMut(&[VelocityWindow], usize) -> Result<Vec<VelocityWindow>, IntentError>,
{
    fn predict(&mut self, y_t: &[VelocityWindow], t: usize) -> Result<Vec<VelocityWindow>, IntentError> {
        self(y_t, t)
    }
}

/// Evenly strided steps `t_i = T̂ − ⌊i·T̂/K⌋` for `i = 0..K`, followed by `0`.
pub fn ddim_timesteps(diffusion_steps: usize, k: usize) -> Result<Vec<usize>, IntentError> {
    if k == 0 || k > diffusion_steps {
        return Err(IntentError::TooManySamplingSteps {
            k,
            steps: diffusion_steps,
        });
    }
    let mut ts: Vec<usize> = (0..k).map(|i| diffusion_steps - i * diffusion_steps / k).collect();
    ts.push(0);
    Ok(ts)
}

/// Deterministic (η = 0) DDIM sampling from the initial draws `y_T̂`.
///
/// Returns the `ŷ_0` estimate after every step; the last entry is the sample.
/// The update is carried in the `(ŷ_0, ε)` parameterization:
/// `ŷ_0 ← ŷ_0 + √((1 − ᾱ_t)/ᾱ_t)·(ε_prev − ε_θ)`, which is the same recursion as
/// re-deriving `ŷ_0` from `y_t = √ᾱ_t·ŷ_0 + √(1 − ᾱ_t)·ε_prev`, without the
/// round-off of dividing back out.
pub fn ddim_trace<P: NoisePredictor + ?Sized>(
    predictor: &mut P,
    schedule: &NoiseSchedule,
    k: usize,
    init: &[VelocityWindow],
) -> Result<Vec<Vec<VelocityWindow>>, IntentError> {
    let ts = ddim_timesteps(schedule.steps(), k)?;
    if init.is_empty() {
        return Err(IntentError::EmptyBatch);
    }
    let mut y = init.to_vec();
    let mut state: Option<(Vec<VelocityWindow>, Vec<VelocityWindow>)> = None;
    let mut trace = Vec::with_capacity(k);
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let ab = schedule.alpha_bar(t);
        let eps = predictor.predict(&y, t)?;
        if eps.len() != y.len() {
            return Err(IntentError::Shape(format!(
                "predictor returned {} windows for {}",
                eps.len(),
                y.len()
            )));
        }
        let x0: Vec<VelocityWindow> = match &state {
            None => y
                .iter()
                .zip(&eps)
                .map(|(yt, e)| {
                    let centered = yt.combine(e, 1.0, -(1.0 - ab).sqrt());
                    VelocityWindow::from_flat(&centered.flat().iter().map(|v| v / ab.sqrt()).collect::<Vec<_>>())
                })
                .collect(),
            Some((x0, eps_prev)) => {
                let gain = ((1.0 - ab) / ab).sqrt();
                x0.iter()
                    .zip(eps_prev)
                    .zip(&eps)
                    .map(|((x, ep), e)| {
                        let de = ep.combine(e, 1.0, -1.0);
                        x.combine(&de, 1.0, gain)
                    })
                    .collect()
            }
        };
        let abp = schedule.alpha_bar(t_prev);
        y = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| x.combine(e, abp.sqrt(), (1.0 - abp).sqrt()))
            .collect();
        trace.push(x0.clone());
        state = Some((x0, eps));
    }
    Ok(trace)
}

/// Final `ŷ_0` of [`ddim_trace`].
pub fn ddim_sample<P: NoisePredictor + ?Sized>(
    predictor: &mut P,
    schedule: &NoiseSchedule,
    k: usize,
    init: &[VelocityWindow],
) -> Result<Vec<VelocityWindow>, IntentError> {
    Ok(ddim_trace(predictor, schedule, k, init)?
        .pop()
        .expect("at least one step"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::cosine_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn draws(n: usize, seed: u64) -> Vec<VelocityWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| VelocityWindow::from_fn(6, |_, _| StandardNormal.sample(&mut rng)))
            .collect()
    }

    #[test]
    fn strided_timesteps() {
        let ts = ddim_timesteps(100, 20).unwrap();
        assert_eq!(ts.len(), 21);
        assert_eq!(&ts[..3], &[100, 95, 90]);
        assert_eq!(&ts[19..], &[5, 0]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (0..=10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn zero_noise_prediction_returns_scaled_draw() {
        let s = cosine_schedule(100).unwrap();
        let init = draws(3, 1);
        let mut zero = |y: &[VelocityWindow], _t: usize| Ok(vec![VelocityWindow::zeros(6); y.len()]);
        let out = ddim_sample(&mut zero, &s, 20, &init).unwrap();
        let ab = s.alpha_bar(100);
        for (o, y) in out.iter().zip(&init) {
            let expect: Vec<f64> = y.flat().iter().map(|v| v / ab.sqrt()).collect();
            assert_eq!(o.flat(), expect);
        }
    }

    #[test]
    fn constant_noise_is_a_fixed_point() {
        let s = cosine_schedule(100).unwrap();
        let init = draws(2, 2);
        let c = VelocityWindow::from_fn(6, |h, ch| 0.3 * h as f64 - 0.7 * ch as f64);
        let mut constant = |y: &[VelocityWindow], _t: usize| Ok(vec![c.clone(); y.len()]);
        let trace = ddim_trace(&mut constant, &s, 20, &init).unwrap();
        assert_eq!(trace.len(), 20);
        for step in &trace[1..] {
            for (a, b) in step.iter().zip(&trace[0]) {
                for (x, y) in a.flat().iter().zip(b.flat()) {
                    assert!((x - y).abs() <= 1e-10);
                }
            }
        }
    }

    /// Textbook recursion re-deriving ŷ_0 from y_t at every step.
    fn reference(s: &NoiseSchedule, k: usize, init: &[f64], eps: impl Fn(&[f64], usize) -> Vec<f64>) -> Vec<f64> {
        let ts = ddim_timesteps(s.steps(), k).unwrap();
        let mut y = init.to_vec();
        let mut x0 = vec![];
        for p in ts.windows(2) {
            let (ab, abp) = (s.alpha_bar(p[0]), s.alpha_bar(p[1]));
            let e = eps(&y, p[0]);
            x0 = y
                .iter()
                .zip(&e)
                .map(|(y, e)| (y - (1.0 - ab).sqrt() * e) / ab.sqrt())
                .collect();
            y = x0
                .iter()
                .zip(&e)
                .map(|(x, e)| abp.sqrt() * x + (1.0 - abp).sqrt() * e)
                .collect();
        }
        x0
    }

    #[test]
    fn matches_textbook_recursion() {
        let s = cosine_schedule(100).unwrap();
        let init = draws(1, 3);
        let f = |y: &[f64], t: usize| -> Vec<f64> {
            y.iter()
                .enumerate()
                .map(|(i, v)| 0.5 * v.tanh() + 0.01 * (t + i) as f64)
                .collect()
        };
        let mut pred = |y: &[VelocityWindow], t: usize| {
            Ok(y.iter().map(|w| VelocityWindow::from_flat(&f(&w.flat(), t))).collect())
        };
        let ours = ddim_sample(&mut pred, &s, 20, &init).unwrap();
        let theirs = reference(&s, 20, &init[0].flat(), f);
        for (a, b) in ours[0].flat().iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn same_draw_same_output() {
        let s = cosine_schedule(50).unwrap();
        let init = draws(2, 4);
        let mut pred = |y: &[VelocityWindow], t: usize| Ok(y.iter().map(|w| w.scaled(0.1 * t as f64 / 50.0)).collect());
        let a = ddim_sample(&mut pred, &s, 10, &init).unwrap();
        let b = ddim_sample(&mut pred, &s, 10, &init).unwrap();
        assert_eq!(a, b);
    }
}
