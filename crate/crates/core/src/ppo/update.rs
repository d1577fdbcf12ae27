use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{adam_step, backward, eval_graph, resume_graph, AdamState, Gradients, Tensor};

use super::env::{ACTOR_OBS, CRITIC_OBS};
use super::gae::normalize_advantages;
use super::policy::{obs_tensors, policy_graph, GaussianPolicy};
use super::{PpoConfig, PpoError};

/// Flattened on-policy batch with raw (unnormalized) advantages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub actor_obs: Vec<[f64; ACTOR_OBS]>,
    pub critic_obs: Vec<[f64; CRITIC_OBS]>,
    pub actions: Vec<[f64; 3]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<(), PpoError> {
        let n = self.len();
        let lens = [
            self.actor_obs.len(),
            self.critic_obs.len(),
            self.log_probs.len(),
            self.values.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(PpoError::Shape(format!("rollout columns {lens:?} vs {n} actions")));
        }
        Ok(())
    }
}

/// Per-sample `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Fraction of ratios outside `[1−ε, 1+ε]`.
pub fn clip_fraction(ratios: &[f64], clip: f64) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().filter(|r| (*r - 1.0).abs() > clip).count() as f64 / ratios.len() as f64
}

/// Means over the minibatch steps actually taken.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateSummary {
    /// Clipped surrogate objective (to be maximized).
    pub surrogate: f64,
    pub value_loss: f64,
    /// Largest approximate KL seen, including the one that stopped the update.
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub steps: usize,
    pub early_stopped: bool,
}

/// Clipped-surrogate epochs over shuffled minibatches. Advantages are
/// normalized over the whole batch first. The clip is applied through 0/1
/// masks evaluated from the forward pass, which reproduces the gradient of
/// the clipped objective wherever it is differentiable.
pub fn ppo_update<R: Rng>(
    policy: &mut GaussianPolicy,
    adam: &mut AdamState,
    rollout: &Rollout,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateSummary, PpoError> {
    config.validate()?;
    rollout.check()?;
    let n = rollout.len();
    let mut adv = rollout.advantages.clone();
    normalize_advantages(&mut adv);
    let mb = n.div_ceil(config.minibatches);
    let mut order: Vec<usize> = (0..n).collect();
    let mut sum = UpdateSummary::default();
    'epochs: for _ in 0..config.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let m = idx.len();
            let mut pg = policy_graph(&policy.config, true);
            let actor: Vec<_> = idx.iter().map(|&i| rollout.actor_obs[i]).collect();
            let critic: Vec<_> = idx.iter().map(|&i| rollout.critic_obs[i]).collect();
            let col = |v: &[f64]| Tensor::new(vec![m, 1], idx.iter().map(|&i| v[i]).collect()).expect("column");
            let mut inputs: BTreeMap<String, Tensor> = obs_tensors(&actor, &critic).into_iter().collect();
            inputs.insert(
                "act".into(),
                Tensor::new(vec![m, 3], idx.iter().flat_map(|&i| rollout.actions[i]).collect())?,
            );
            let mut ev = eval_graph(&pg.graph, &(&policy.params, &inputs))?;
            let lp_node = pg.log_prob.expect("built with actions");
            let lp = ev.value(lp_node).data().to_vec();
            let v = ev.value(pg.value).data().to_vec();

            let ratios: Vec<f64> = idx
                .iter()
                .zip(&lp)
                .map(|(&i, l)| (l - rollout.log_probs[i]).exp())
                .collect();
            let kl = ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / m as f64;
            if !kl.is_finite() {
                return Err(PpoError::NonFinite("approximate KL".into()));
            }
            sum.approx_kl = sum.approx_kl.max(kl);
            if kl > config.kl_target {
                sum.early_stopped = true;
                break 'epochs;
            }

            let mut policy_coef = Vec::with_capacity(m);
            let mut value_mask = Vec::with_capacity(m);
            let (mut surr, mut vloss) = (0.0, 0.0);
            for (k, &i) in idx.iter().enumerate() {
                let (r, a) = (ratios[k], adv[i]);
                surr += clipped_objective(r, a, config.clip);
                let clipped = (a > 0.0 && r > 1.0 + config.clip) || (a < 0.0 && r < 1.0 - config.clip);
                policy_coef.push(if clipped { 0.0 } else { a });
                let ret = rollout.returns[i];
                let old = rollout.values[i];
                let plain = (v[k] - ret).powi(2);
                let (loss, live) = if config.value_clip {
                    let vc = old + (v[k] - old).clamp(-config.clip, config.clip);
                    let alt = (vc - ret).powi(2);
                    if alt > plain {
                        (alt, (v[k] - old).abs() <= config.clip)
                    } else {
                        (plain, true)
                    }
                } else {
                    (plain, true)
                };
                vloss += loss;
                value_mask.push(if live { 1.0 } else { 0.0 });
            }
            sum.surrogate += surr / m as f64;
            sum.value_loss += vloss / m as f64;
            sum.clip_fraction += clip_fraction(&ratios, config.clip);

            // loss = −mean(c ⊙ exp(lp − lp_old)) + c₁·mean(u ⊙ (V − R)²) − c₂·Σ log σ
            let g = &mut pg.graph;
            let coef = g.input("ppo.coef");
            let old_lp = g.input("ppo.old_log_prob");
            let mask = g.input("ppo.value_mask");
            let ret = g.input("ppo.return");
            let d = g.sub(lp_node, old_lp);
            let ratio = g.exp(d);
            let weighted = g.mul(coef, ratio);
            let surrogate = g.mean(weighted);
            let pol = g.scale(surrogate, -1.0);
            let err = g.sub(pg.value, ret);
            let sq = g.square(err);
            let masked = g.mul(sq, mask);
            let vmean = g.mean(masked);
            let val = g.scale(vmean, config.value_coef);
            let total = g.add(pol, val);
            let sls = g.sum(pg.log_std);
            let ent = g.scale(sls, -config.entropy_coef);
            let loss = g.add(total, ent);
            inputs.insert("ppo.coef".into(), Tensor::new(vec![m, 1], policy_coef)?);
            inputs.insert("ppo.old_log_prob".into(), col(&rollout.log_probs));
            inputs.insert("ppo.value_mask".into(), Tensor::new(vec![m, 1], value_mask)?);
            inputs.insert("ppo.return".into(), col(&rollout.returns));
            resume_graph(&pg.graph, &mut ev, &(&policy.params, &inputs))?;
            if !ev.value(loss).is_finite() {
                return Err(PpoError::NonFinite("PPO loss".into()));
            }
            let mut grads = backward(&pg.graph, &ev, loss)?;
            clip_grad_norm(&mut grads, config.max_grad_norm);
            adam_step(&mut policy.params, &grads, adam, config.lr)?;
            sum.steps += 1;
        }
    }
    if sum.steps > 0 {
        let k = sum.steps as f64;
        sum.surrogate /= k;
        sum.value_loss /= k;
        sum.clip_fraction /= k;
    }
    Ok(sum)
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`.
fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) {
    let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamConfig;
    use crate::ppo::{env_reset, policy_forward, ActionMode, EnvConfig, PolicyConfig, RandomizationConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_branches() {
        let a = 0.7;
        assert_eq!(clipped_objective(1.0, a, 0.2), a);
        assert_eq!(clipped_objective(2.0, a, 0.2), 1.2 * a);
        // With Â < 0 the min picks the more negative clipped branch, 0.8·Â.
        assert_eq!(clipped_objective(0.5, -a, 0.2), 0.8 * -a);
        assert_eq!(clip_fraction(&[1.0; 4], 0.2), 0.0);
        assert_eq!(clip_fraction(&[1.0, 1.3, 0.7, 1.1], 0.2), 0.5);
    }

    #[test]
    fn unit_ratio_surrogate_is_mean_advantage() {
        let adv = [0.3, -1.2, 2.0, 0.1];
        let s: f64 = adv.iter().map(|a| clipped_objective(1.0, *a, 0.2)).sum::<f64>() / 4.0;
        assert!((s - adv.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    fn toy_rollout(policy: &GaussianPolicy, n: usize) -> Rollout {
        let env = EnvConfig::default();
        let obs: Vec<_> = (0..n as u64)
            .map(|s| env_reset(&env, &RandomizationConfig::default(), s).observe())
            .collect();
        let draws: Vec<[f64; 3]> = (0..n).map(|i| [(i as f64).sin(), (i as f64).cos(), 0.3]).collect();
        let out = policy_forward(policy, &obs, ActionMode::Sample(&draws)).unwrap();
        Rollout {
            actor_obs: obs.iter().map(|o| o.actor).collect(),
            critic_obs: obs.iter().map(|o| o.critic).collect(),
            actions: out.iter().map(|o| o.action).collect(),
            log_probs: out.iter().map(|o| o.log_prob).collect(),
            values: out.iter().map(|o| o.value).collect(),
            advantages: draws.iter().map(|d| d[0]).collect(),
            returns: out.iter().map(|o| o.value + 1.0).collect(),
        }
    }

    fn policy() -> GaussianPolicy {
        let cfg = PolicyConfig {
            hidden: 16,
            ..PolicyConfig::default()
        };
        GaussianPolicy::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn first_step_has_unit_ratios_and_improves_the_surrogate() {
        let mut p = policy();
        let r = toy_rollout(&p, 64);
        let cfg = PpoConfig {
            epochs: 1,
            minibatches: 1,
            ..PpoConfig::default()
        };
        let mut adam = AdamState::new(AdamConfig::default());
        let s = ppo_update(&mut p, &mut adam, &r, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.clip_fraction, 0.0);
        assert!(s.approx_kl < 1e-12);
        assert_eq!(s.steps, 1);
        let mut adv = r.advantages.clone();
        normalize_advantages(&mut adv);
        assert!((s.surrogate - adv.iter().sum::<f64>() / 64.0).abs() < 1e-9);

        // The step moved towards higher surrogate on the same batch.
        let obs: Vec<_> = (0..64u64)
            .map(|s| env_reset(&EnvConfig::default(), &RandomizationConfig::default(), s).observe())
            .collect();
        let new = policy_forward(&p, &obs, ActionMode::Mean).unwrap();
        let pg = crate::ppo::policy::policy_graph(&p.config, true);
        let mut inputs: BTreeMap<String, Tensor> = obs_tensors(&r.actor_obs, &r.critic_obs).into_iter().collect();
        inputs.insert("act".into(), Tensor::new(vec![64, 3], r.actions.concat()).unwrap());
        let ev = eval_graph(&pg.graph, &(&p.params, &inputs)).unwrap();
        let after: f64 = ev
            .value(pg.log_prob.unwrap())
            .data()
            .iter()
            .zip(&r.log_probs)
            .zip(&adv)
            .map(|((l, o), a)| clipped_objective((l - o).exp(), *a, 0.2))
            .sum::<f64>()
            / 64.0;
        assert!(after > s.surrogate, "{after} <= {}", s.surrogate);
        assert_eq!(new.len(), 64);
    }

    #[test]
    fn kl_target_stops_epochs_early() {
        let mut p = policy();
        let r = toy_rollout(&p, 64);
        let cfg = PpoConfig {
            epochs: 50,
            minibatches: 1,
            lr: 0.05,
            kl_target: 1e-4,
            ..PpoConfig::default()
        };
        let mut adam = AdamState::new(AdamConfig::default());
        let s = ppo_update(&mut p, &mut adam, &r, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.early_stopped && s.steps < 50 && s.approx_kl > 1e-4);
    }

    #[test]
    fn ragged_rollout_is_rejected() {
        let mut p = policy();
        let mut r = toy_rollout(&p, 8);
        r.returns.pop();
        let mut adam = AdamState::new(AdamConfig::default());
        let err = ppo_update(
            &mut p,
            &mut adam,
            &r,
            &PpoConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(PpoError::Shape(_))));
    }

    #[test]
    fn gradient_clipping_bounds_the_joint_norm() {
        let mut g = Gradients::new();
        g.insert("a".into(), Tensor::full(&[2], 3.0));
        g.insert("b".into(), Tensor::full(&[1], 4.0));
        clip_grad_norm(&mut g, 1.0);
        let n: f64 = g.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
