use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_graph, Graph, NodeId, Params, Tensor};
use crate::checkpoint::{Checkpoint, CheckpointError};

use super::env::{EnvConfig, Observation, ACTOR_OBS, CRITIC_OBS};
use super::PpoError;

pub const CHECKPOINT_KIND: &str = "ppo-policy";

const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Hidden layers in each of the actor and critic.
    pub layers: usize,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            init_log_std: 0.0,
        }
    }
}

/// Diagonal Gaussian actor with a state-independent log-std, plus a critic
/// on the privileged observation. Both are gelu MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub config: PolicyConfig,
    pub params: Params,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyCheckpointConfig {
    policy: PolicyConfig,
    env: EnvConfig,
}

impl GaussianPolicy {
    pub fn new<R: Rng>(config: PolicyConfig, rng: &mut R) -> Result<Self, PpoError> {
        if config.hidden == 0 || config.layers == 0 || !config.init_log_std.is_finite() {
            return Err(PpoError::Config(format!("policy {config:?}")));
        }
        let mut params = Params::new();
        for (net, input) in [("actor", ACTOR_OBS), ("critic", CRITIC_OBS)] {
            let mut fan_in = input;
            for l in 0..config.layers {
                params.add_linear(&format!("{net}.l{l}"), fan_in, config.hidden, rng);
                fan_in = config.hidden;
            }
        }
        params.add_linear("actor.mu", config.hidden, 3, rng);
        let w = params.get_mut("actor.mu.w").expect("just added");
        *w = w.map(|v| 0.01 * v);
        params.add_linear("critic.v", config.hidden, 1, rng);
        params.insert("actor.log_std", Tensor::full(&[3], config.init_log_std));
        Ok(Self { config, params })
    }

    pub fn log_std(&self) -> [f64; 3] {
        let t = self
            .params
            .get("actor.log_std")
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        std::array::from_fn(|i| t.get(i).copied().unwrap_or(f64::NAN))
    }

    pub fn to_checkpoint(&self, env: &EnvConfig) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::new(
            CHECKPOINT_KIND,
            &PolicyCheckpointConfig {
                policy: self.config.clone(),
                env: env.clone(),
            },
            None,
            self.params.clone().into_inner(),
        )
    }

    /// Policy and the environment constants it was trained on.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, EnvConfig), CheckpointError> {
        let cfg: PolicyCheckpointConfig = ck.config_as()?;
        let mut params = Params::new();
        for (k, v) in &ck.tensors {
            params.insert(k.clone(), v.clone());
        }
        Ok((
            Self {
                config: cfg.policy,
                params,
            },
            cfg.env,
        ))
    }
}

/// Nodes of the actor-critic graph over a batch of `B` observations.
pub(crate) struct PolicyGraph {
    pub graph: Graph,
    /// `[B, 3]`
    pub mean: NodeId,
    /// `[B, 1]`
    pub value: NodeId,
    /// `[B, 1]`; present when built with stored actions.
    pub log_prob: Option<NodeId>,
    pub log_std: NodeId,
}

fn mlp(g: &mut Graph, mut x: NodeId, net: &str, layers: usize) -> NodeId {
    for l in 0..layers {
        let h = g.linear(x, &format!("{net}.l{l}"));
        x = g.gelu(h);
    }
    x
}

/// Inputs `obs.actor`, `obs.critic` and, with `with_actions`, `act`.
pub(crate) fn policy_graph(config: &PolicyConfig, with_actions: bool) -> PolicyGraph {
    let mut g = Graph::new();
    let oa = g.input("obs.actor");
    let oc = g.input("obs.critic");
    let ha = mlp(&mut g, oa, "actor", config.layers);
    let mean = g.linear(ha, "actor.mu");
    let hc = mlp(&mut g, oc, "critic", config.layers);
    let value = g.linear(hc, "critic.v");
    let log_std = g.param("actor.log_std");
    let log_prob = with_actions.then(|| {
        let act = g.input("act");
        let diff = g.sub(act, mean);
        let neg = g.scale(log_std, -1.0);
        let inv_std = g.exp(neg);
        let z = g.mul(diff, inv_std);
        let z2 = g.square(z);
        let ssq = g.sum_axis(z2, 1);
        let half = g.scale(ssq, -0.5);
        let sls = g.sum(log_std);
        let norm = g.add_scalar(sls, 3.0 * HALF_LOG_TAU);
        let neg_norm = g.scale(norm, -1.0);
        g.add(half, neg_norm)
    });
    PolicyGraph {
        graph: g,
        mean,
        value,
        log_prob,
        log_std,
    }
}

pub(crate) fn obs_tensors(actor: &[[f64; ACTOR_OBS]], critic: &[[f64; CRITIC_OBS]]) -> [(String, Tensor); 2] {
    let flat = |rows: &[f64], n: usize, w: usize| Tensor::new(vec![n, w], rows.to_vec()).expect("row-major batch");
    [
        ("obs.actor".into(), flat(actor.as_flattened(), actor.len(), ACTOR_OBS)),
        (
            "obs.critic".into(),
            flat(critic.as_flattened(), critic.len(), CRITIC_OBS),
        ),
    ]
}

pub enum ActionMode<'a> {
    /// Deterministic action `μ(o)`.
    Mean,
    /// `μ(o) + σ ⊙ ε` for one standard-normal draw per observation.
    Sample(&'a [[f64; 3]]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyOutput {
    /// Unclamped action.
    pub action: [f64; 3],
    pub mean: [f64; 3],
    pub log_prob: f64,
    pub value: f64,
}

/// Actions, exact Gaussian log-densities and critic values for a batch.
pub fn policy_forward(
    policy: &GaussianPolicy,
    obs: &[Observation],
    mode: ActionMode<'_>,
) -> Result<Vec<PolicyOutput>, PpoError> {
    if let ActionMode::Sample(d) = mode {
        if d.len() != obs.len() {
            return Err(PpoError::Shape(format!(
                "{} draws for {} observations",
                d.len(),
                obs.len()
            )));
        }
    }
    if obs.is_empty() {
        return Ok(Vec::new());
    }
    let pg = policy_graph(&policy.config, false);
    let actor: Vec<_> = obs.iter().map(|o| o.actor).collect();
    let critic: Vec<_> = obs.iter().map(|o| o.critic).collect();
    let inputs: std::collections::BTreeMap<String, Tensor> = obs_tensors(&actor, &critic).into_iter().collect();
    let ev = eval_graph(&pg.graph, &(&policy.params, &inputs))?;
    let means = ev.value(pg.mean).data();
    let values = ev.value(pg.value).data();
    let log_std = ev.value(pg.log_std).data();
    if log_std.len() != 3 || means.len() != 3 * obs.len() {
        return Err(PpoError::Shape(format!(
            "policy emits {} means and {} log-stds",
            means.len(),
            log_std.len()
        )));
    }
    let base = -log_std.iter().sum::<f64>() - 3.0 * HALF_LOG_TAU;
    let out = (0..obs.len())
        .map(|i| {
            let mean: [f64; 3] = std::array::from_fn(|j| means[3 * i + j]);
            let (action, log_prob) = match mode {
                ActionMode::Mean => (mean, base),
                ActionMode::Sample(d) => {
                    let e = d[i];
                    (
                        std::array::from_fn(|j| mean[j] + log_std[j].exp() * e[j]),
                        base - 0.5 * e.iter().map(|v| v * v).sum::<f64>(),
                    )
                }
            };
            PolicyOutput {
                action,
                mean,
                log_prob,
                value: values[i],
            }
        })
        .collect::<Vec<_>>();
    if out
        .iter()
        .any(|o| !(o.action.iter().all(|v| v.is_finite()) && o.value.is_finite()))
    {
        return Err(PpoError::NonFinite("policy output".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check, GradCheckConfig};
    use crate::ppo::{env_reset, RandomizationConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(log_std: f64) -> (GaussianPolicy, Vec<Observation>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PolicyConfig {
            hidden: 16,
            init_log_std: log_std,
            ..PolicyConfig::default()
        };
        let p = GaussianPolicy::new(cfg, &mut rng).unwrap();
        let env = EnvConfig::default();
        let obs = (0..5)
            .map(|s| env_reset(&env, &RandomizationConfig::default(), s).observe())
            .collect();
        (p, obs)
    }

    #[test]
    fn mean_mode_log_prob_is_density_at_the_mean() {
        let (p, obs) = setup(-0.3);
        let out = policy_forward(&p, &obs, ActionMode::Mean).unwrap();
        let expect = -0.5 * 3.0 * (std::f64::consts::TAU.ln() + 2.0 * -0.3);
        for o in &out {
            assert_eq!(o.action, o.mean);
            assert!((o.log_prob - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_std_samples_collapse_to_the_mean() {
        let (p, obs) = setup(-30.0);
        let draws = vec![[1.0, -2.0, 0.5]; obs.len()];
        for o in policy_forward(&p, &obs, ActionMode::Sample(&draws)).unwrap() {
            for j in 0..3 {
                assert!((o.action[j] - o.mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_log_prob_matches_closed_form() {
        let (p, obs) = setup(0.2);
        let draws: Vec<[f64; 3]> = (0..obs.len()).map(|i| [0.1 * i as f64, -0.3, 1.2]).collect();
        let out = policy_forward(&p, &obs, ActionMode::Sample(&draws)).unwrap();
        let pg = policy_graph(&p.config, true);
        let actor: Vec<_> = obs.iter().map(|o| o.actor).collect();
        let critic: Vec<_> = obs.iter().map(|o| o.critic).collect();
        let mut inputs: std::collections::BTreeMap<String, Tensor> = obs_tensors(&actor, &critic).into_iter().collect();
        let acts: Vec<f64> = out.iter().flat_map(|o| o.action).collect();
        inputs.insert("act".into(), Tensor::new(vec![obs.len(), 3], acts).unwrap());
        let ev = eval_graph(&pg.graph, &(&p.params, &inputs)).unwrap();
        for (o, lp) in out.iter().zip(ev.value(pg.log_prob.unwrap()).data()) {
            assert!((o.log_prob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_gradients_check_out() {
        let (p, obs) = setup(0.1);
        let mut pg = policy_graph(&p.config, true);
        let lp = pg.log_prob.unwrap();
        let both = pg.graph.add(lp, pg.value);
        let out = pg.graph.sum(both);
        let actor: Vec<_> = obs.iter().map(|o| o.actor).collect();
        let critic: Vec<_> = obs.iter().map(|o| o.critic).collect();
        let mut inputs: std::collections::BTreeMap<String, Tensor> = obs_tensors(&actor, &critic).into_iter().collect();
        inputs.insert(
            "act".into(),
            Tensor::from_fn(&[obs.len(), 3], |i| (i as f64 * 0.37).sin()),
        );
        let report = grad_check(&pg.graph, out, &p.params, &inputs, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        let ev = eval_graph(&pg.graph, &(&p.params, &inputs)).unwrap();
        assert!(backward(&pg.graph, &ev, out).unwrap().contains_key("actor.log_std"));
    }

    #[test]
    fn seeded_sampling_is_reproducible_and_shapes_are_checked() {
        let (p, obs) = setup(0.0);
        let draws = vec![[0.3, 0.1, -0.4]; obs.len()];
        assert_eq!(
            policy_forward(&p, &obs, ActionMode::Sample(&draws)).unwrap(),
            policy_forward(&p, &obs, ActionMode::Sample(&draws)).unwrap()
        );
        assert!(policy_forward(&p, &obs, ActionMode::Sample(&draws[..2])).is_err());
        let mut bad = p.clone();
        bad.params.insert("actor.l0.w", Tensor::zeros(&[7, 16]));
        assert!(policy_forward(&bad, &obs, ActionMode::Mean).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (p, _) = setup(0.0);
        let env = EnvConfig::default();
        let ck = p.to_checkpoint(&env).unwrap();
        let back = Checkpoint::from_json(&ck.to_json().unwrap(), CHECKPOINT_KIND).unwrap();
        assert_eq!(GaussianPolicy::from_checkpoint(&back).unwrap(), (p, env));
    }
}
