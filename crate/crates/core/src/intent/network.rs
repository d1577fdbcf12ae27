use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, eval_graph, sinusoidal_embed, Gradients, Graph, NodeId, Params, Tensor};
use crate::wavelet::{ConditioningStack, CHANNELS};

use super::attention::{attend, mix_levels, row_entropy, weights_from_entropies};
use super::schedule::{forward_diffuse, NoiseSchedule};
use super::train::IntentExample;
use super::{IntentError, VelocityWindow};

const LN_EPS: f64 = 1e-5;

/// Gain on the `y_t` skip path. Stored with the weights so a zeroed network
/// predicts zero noise, but held at one during training: any drift δ becomes
/// an error of δ/√ᾱ in the first DDIM step.
pub(crate) const SKIP_GAIN: &str = "out.skip";

/// Shape and architecture of the ε-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsNetConfig {
    /// Predicted frames `H`.
    pub horizon: usize,
    /// Wrench samples per horizon block `S`.
    pub block: usize,
    /// Approximation levels `L`.
    pub levels: usize,
    /// Token width `d`.
    pub width: usize,
    /// Transformer blocks `n_L`.
    pub blocks: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// One set of condition projections, key MLP and latent heads for all levels.
    pub shared_level_weights: bool,
    /// Let every query attend to all `H·S` tokens instead of its own block.
    pub cross_block: bool,
    /// `λ_KL`
    pub kl_weight: f64,
}

impl Default for EpsNetConfig {
    fn default() -> Self {
        Self {
            horizon: 6,
            block: 33,
            levels: 4,
            width: 128,
            blocks: 4,
            ff_mult: 4,
            shared_level_weights: true,
            cross_block: false,
            kl_weight: 0.01,
        }
    }
}

/// How attention keys are produced from the latent Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KeyMode {
    /// `k̃ = μ + σ∘u` with draws bound as `latent.u.{ℓ}`.
    Sampled,
    /// `k = μ`
    Mean,
}

impl EpsNetConfig {
    pub fn validate(&self) -> Result<(), IntentError> {
        let bad = |m: &str| Err(IntentError::Config(m.to_string()));
        if self.horizon == 0 || self.block == 0 || self.levels == 0 || self.blocks == 0 {
            return bad("horizon, block, levels and blocks must be positive");
        }
        if self.width < 2 || self.width % 2 != 0 {
            return bad("width must be even and at least 2");
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be finite and non-negative");
        }
        Ok(())
    }

    /// Wrench samples per window, `H·S`.
    pub fn window_len(&self) -> usize {
        self.horizon * self.block
    }

    fn level_prefix(&self, base: &str, l: usize) -> String {
        if self.shared_level_weights {
            base.to_string()
        } else {
            format!("{base}.{l}")
        }
    }

    fn level_count(&self) -> usize {
        if self.shared_level_weights {
            1
        } else {
            self.levels
        }
    }

    /// Randomly initialized parameters.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Result<Params, IntentError> {
        self.validate()?;
        let d = self.width;
        let mut p = Params::new();
        for l in 0..self.level_count() {
            for group in ["cond.wf", "cond.wt"] {
                let std = (1.0 / CHANNELS as f64).sqrt();
                let w = Tensor::from_fn(&[CHANNELS, d / 2], |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                });
                p.insert(self.level_prefix(group, l), w);
            }
            for head in ["key.l1", "key.l2", "key.mu", "key.logvar"] {
                p.add_linear(&self.level_prefix(head, l), d, d, rng);
            }
        }
        p.add_linear("query.in", 3, d, rng);
        let ln = |p: &mut Params, prefix: &str| {
            p.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
        };
        for i in 0..self.blocks {
            ln(&mut p, &format!("block{i}.ln1"));
            p.add_linear(&format!("block{i}.q"), d, d, rng);
            p.add_linear(&format!("block{i}.o"), d, d, rng);
            ln(&mut p, &format!("block{i}.ln2"));
            p.add_linear(&format!("block{i}.ff1"), d, d * self.ff_mult, rng);
            p.add_linear(&format!("block{i}.ff2"), d * self.ff_mult, d, rng);
        }
        ln(&mut p, "out.ln");
        p.add_linear("out.head", d, 3, rng);
        p.insert(SKIP_GAIN, Tensor::full(&[3], 1.0));
        Ok(p)
    }

    fn check_stacks(&self, force: &ConditioningStack, torque: &ConditioningStack) -> Result<(), IntentError> {
        for (name, s) in [("force", force), ("torque", torque)] {
            if s.horizon != self.horizon || s.block != self.block || s.levels != self.levels {
                return Err(IntentError::Shape(format!(
                    "{name} stack is (H={}, S={}, L={}), model expects (H={}, S={}, L={})",
                    s.horizon, s.block, s.levels, self.horizon, self.block, self.levels
                )));
            }
        }
        Ok(())
    }

    /// `(groups, tokens per group)` of the key/value layout.
    fn kv_layout(&self, batch: usize) -> (usize, usize, usize) {
        if self.cross_block {
            (batch, self.horizon, self.horizon * self.block)
        } else {
            (batch * self.horizon, 1, self.block)
        }
    }
}

/// Latent Gaussian over one level's keys for one window (`H·S × d` each).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentKeySample {
    pub mu: Tensor,
    pub logvar: Tensor,
    /// `k̃ = μ + exp(½·logσ²)∘u`
    pub keys: Tensor,
    /// The standard-normal draw `u` (zeros in mean mode).
    pub draw: Tensor,
}

impl LatentKeySample {
    pub fn new(mu: Tensor, logvar: Tensor, draw: Tensor) -> Result<Self, IntentError> {
        if mu.shape() != logvar.shape() || mu.shape() != draw.shape() {
            return Err(IntentError::Shape(format!(
                "mu {:?}, logvar {:?}, draw {:?}",
                mu.shape(),
                logvar.shape(),
                draw.shape()
            )));
        }
        let keys = Tensor::from_fn(mu.shape(), |i| {
            mu.data()[i] + (0.5 * logvar.data()[i]).exp() * draw.data()[i]
        });
        Ok(Self { mu, logvar, keys, draw })
    }
}

/// `½·mean(μ² + σ² − logσ² − 1)` over levels, tokens and dimensions.
pub fn kl_divergence(samples: &[LatentKeySample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        for (m, lv) in s.mu.data().iter().zip(s.logvar.data()) {
            total += m * m + lv.exp() - lv - 1.0;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        0.5 * total / count as f64
    }
}

/// Noise used for one training batch: diffusion steps, target noise and latent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    /// `t ∈ 1..=T̂` per example.
    pub steps: Vec<usize>,
    pub eps: Vec<VelocityWindow>,
    /// Per level, `B·H·S × d` standard-normal draws.
    pub key_draws: Vec<Tensor>,
}

impl NoiseBatch {
    pub fn draw<R: Rng>(config: &EpsNetConfig, batch: usize, diffusion_steps: usize, rng: &mut R) -> Self {
        let steps = (0..batch).map(|_| rng.random_range(1..=diffusion_steps)).collect();
        let eps = (0..batch)
            .map(|_| {
                let v: Vec<f64> = (0..config.horizon * 3).map(|_| StandardNormal.sample(rng)).collect();
                VelocityWindow::from_flat(&v)
            })
            .collect();
        let rows = batch * config.window_len();
        let key_draws = if rows == 0 {
            Vec::new()
        } else {
            (0..config.levels)
                .map(|_| Tensor::from_fn(&[rows, config.width], |_| StandardNormal.sample(rng)))
                .collect()
        };
        Self { steps, eps, key_draws }
    }
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diff: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(diff: f64, kl: f64, kl_weight: f64) -> Self {
        Self {
            diff,
            kl,
            total: diff + kl_weight * kl,
        }
    }
}

struct Encoder {
    mu: Vec<NodeId>,
    logvar: Vec<NodeId>,
    keys: Vec<NodeId>,
}

fn affine_norm(g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
    let n = g.layer_norm(x, LN_EPS);
    let gain = g.param(&format!("{prefix}.g"));
    let bias = g.param(&format!("{prefix}.b"));
    let scaled = g.mul(n, gain);
    g.add(scaled, bias)
}

/// Condition inputs are bound as `cond.force.{ℓ}` / `cond.torque.{ℓ}` with rows
/// ordered `(b, h, s)`.
fn build_encoder(g: &mut Graph, cfg: &EpsNetConfig, mode: KeyMode) -> Encoder {
    let mut enc = Encoder {
        mu: Vec::new(),
        logvar: Vec::new(),
        keys: Vec::new(),
    };
    for l in 0..cfg.levels {
        let f = g.input(&format!("cond.force.{l}"));
        let t = g.input(&format!("cond.torque.{l}"));
        let wf = g.param(&cfg.level_prefix("cond.wf", l));
        let wt = g.param(&cfg.level_prefix("cond.wt", l));
        let pf = g.matmul(f, wf);
        let pt = g.matmul(t, wt);
        let h = g.concat(&[pf, pt], 1);
        let h = g.linear(h, &cfg.level_prefix("key.l1", l));
        let h = g.gelu(h);
        let h = g.linear(h, &cfg.level_prefix("key.l2", l));
        let mu = g.linear(h, &cfg.level_prefix("key.mu", l));
        let logvar = g.linear(h, &cfg.level_prefix("key.logvar", l));
        let keys = match mode {
            KeyMode::Mean => mu,
            KeyMode::Sampled => {
                let u = g.input(&format!("latent.u.{l}"));
                let half = g.scale(logvar, 0.5);
                let sigma = g.exp(half);
                let noise = g.mul(sigma, u);
                g.add(mu, noise)
            }
        };
        enc.mu.push(mu);
        enc.logvar.push(logvar);
        enc.keys.push(keys);
    }
    enc
}

/// Queries are bound as `query.y` (`B·H × 3`) and `query.temb` (`B·H × d`);
/// `keys[ℓ]` has `B·H·S` rows. Returns ε̂ as `B·H × 3`.
fn build_denoiser(g: &mut Graph, cfg: &EpsNetConfig, keys: &[NodeId], batch: usize) -> NodeId {
    let d = cfg.width;
    let (groups, queries, tokens) = cfg.kv_layout(batch);
    let kv: Vec<NodeId> = keys.iter().map(|&k| g.reshape(k, &[groups, tokens, d])).collect();
    let y = g.input("query.y");
    let temb = g.input("query.temb");
    let proj = g.linear(y, "query.in");
    let mut x = g.add(proj, temb);
    for i in 0..cfg.blocks {
        let h = affine_norm(g, x, &format!("block{i}.ln1"));
        let q = g.linear(h, &format!("block{i}.q"));
        let q = g.reshape(q, &[groups, queries, d]);
        let mut ents = Vec::with_capacity(cfg.levels);
        let mut ctxs = Vec::with_capacity(cfg.levels);
        for &k in &kv {
            let (a, c) = attend(g, q, k, k, d);
            ents.push(row_entropy(g, a, 2));
            ctxs.push(c);
        }
        let w = weights_from_entropies(g, &ents, 2);
        let ctx = mix_levels(g, w, &ctxs, 2);
        let ctx = g.reshape(ctx, &[batch * cfg.horizon, d]);
        let o = g.linear(ctx, &format!("block{i}.o"));
        x = g.add(x, o);
        let h = affine_norm(g, x, &format!("block{i}.ln2"));
        let f = g.linear(h, &format!("block{i}.ff1"));
        let f = g.gelu(f);
        let f = g.linear(f, &format!("block{i}.ff2"));
        x = g.add(x, f);
    }
    let out = affine_norm(g, x, "out.ln");
    let v = g.linear(out, "out.head");
    // ε̂ = √ᾱ·v̂ + √(1−ᾱ)·s∘y_t: the head predicts v, so its error is not
    // amplified by 1/√ᾱ when DDIM recovers ŷ_0 at the noisiest steps.
    let sa = g.input("query.sqrt_ab");
    let sb = g.input("query.sqrt_1mab");
    let v = g.mul(v, sa);
    let gate = g.param(SKIP_GAIN);
    let skip = g.mul(y, gate);
    let skip = g.mul(skip, sb);
    g.add(v, skip)
}

/// `½·mean(μ² + e^{logσ²} − logσ² − 1)` averaged over levels.
fn build_kl(g: &mut Graph, enc: &Encoder) -> NodeId {
    let mut acc = None;
    for (&mu, &lv) in enc.mu.iter().zip(&enc.logvar) {
        let m2 = g.square(mu);
        let var = g.exp(lv);
        let s = g.add(m2, var);
        let s = g.sub(s, lv);
        let s = g.add_scalar(s, -1.0);
        let m = g.mean(s);
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m),
        });
    }
    let total = acc.expect("at least one level");
    g.scale(total, 0.5 / enc.mu.len() as f64)
}

fn bind_conditions<'a>(
    cfg: &EpsNetConfig,
    pairs: impl Iterator<Item = (&'a ConditioningStack, &'a ConditioningStack)> + Clone,
    data: &mut BTreeMap<String, Tensor>,
) -> Result<usize, IntentError> {
    let mut batch = 0;
    for (f, t) in pairs.clone() {
        cfg.check_stacks(f, t)?;
        batch += 1;
    }
    if batch == 0 {
        return Err(IntentError::EmptyBatch);
    }
    let rows = batch * cfg.window_len();
    for l in 0..cfg.levels {
        let mut fd = Vec::with_capacity(rows * CHANNELS);
        let mut td = Vec::with_capacity(rows * CHANNELS);
        for (f, t) in pairs.clone() {
            fd.extend(f.level_tokens(l));
            td.extend(t.level_tokens(l));
        }
        data.insert(format!("cond.force.{l}"), Tensor::new(vec![rows, CHANNELS], fd)?);
        data.insert(format!("cond.torque.{l}"), Tensor::new(vec![rows, CHANNELS], td)?);
    }
    Ok(batch)
}

fn bind_queries(
    cfg: &EpsNetConfig,
    schedule: &NoiseSchedule,
    y_t: &[VelocityWindow],
    steps: &[usize],
    data: &mut BTreeMap<String, Tensor>,
) -> Result<(), IntentError> {
    let mut y = Vec::with_capacity(y_t.len() * cfg.horizon * 3);
    let mut temb = Vec::with_capacity(y_t.len() * cfg.horizon * cfg.width);
    let mut sa = Vec::with_capacity(y_t.len() * cfg.horizon);
    let mut sb = Vec::with_capacity(y_t.len() * cfg.horizon);
    for (w, &t) in y_t.iter().zip(steps) {
        if t > schedule.steps() {
            return Err(IntentError::StepOutOfRange {
                t,
                steps: schedule.steps(),
            });
        }
        let ab = schedule.alpha_bar(t);
        if w.horizon() != cfg.horizon {
            return Err(IntentError::Shape(format!(
                "velocity window has {} rows, model expects {}",
                w.horizon(),
                cfg.horizon
            )));
        }
        y.extend(w.flat());
        let e = sinusoidal_embed(t as f64, cfg.width)?;
        for _ in 0..cfg.horizon {
            temb.extend_from_slice(e.data());
            sa.push(ab.sqrt());
            sb.push((1.0 - ab).sqrt());
        }
    }
    let rows = y_t.len() * cfg.horizon;
    data.insert("query.y".into(), Tensor::new(vec![rows, 3], y)?);
    data.insert("query.temb".into(), Tensor::new(vec![rows, cfg.width], temb)?);
    data.insert("query.sqrt_ab".into(), Tensor::new(vec![rows, 1], sa)?);
    data.insert("query.sqrt_1mab".into(), Tensor::new(vec![rows, 1], sb)?);
    Ok(())
}

fn split_windows(t: &Tensor, horizon: usize) -> Vec<VelocityWindow> {
    t.data().chunks(horizon * 3).map(VelocityWindow::from_flat).collect()
}

/// Latent key distribution of every level for one window.
///
/// With `draws = None` the keys are the means (inference mode) and the stored
/// draws are zero. Otherwise `draws[ℓ]` must be `H·S × d`.
pub fn encode_condition(
    config: &EpsNetConfig,
    params: &Params,
    force: &ConditioningStack,
    torque: &ConditioningStack,
    draws: Option<&[Tensor]>,
) -> Result<Vec<LatentKeySample>, IntentError> {
    config.validate()?;
    let mut data = BTreeMap::new();
    bind_conditions(config, std::iter::once((force, torque)), &mut data)?;
    let shape = [config.window_len(), config.width];
    let draws: Vec<Tensor> = match draws {
        Some(d) => {
            if d.len() != config.levels {
                return Err(IntentError::Shape(format!(
                    "{} latent draws for {} levels",
                    d.len(),
                    config.levels
                )));
            }
            d.to_vec()
        }
        None => vec![Tensor::zeros(&shape); config.levels],
    };
    let mut g = Graph::new();
    let enc = build_encoder(&mut g, config, KeyMode::Mean);
    let ev = eval_graph(&g, &(params, &data))?;
    enc.mu
        .iter()
        .zip(&enc.logvar)
        .zip(draws)
        .map(|((&mu, &lv), u)| LatentKeySample::new(ev.value(mu).clone(), ev.value(lv).clone(), u))
        .collect()
}

/// Deterministic keys (`μ`) for a batch of windows, per level `B·H·S × d`.
pub(crate) fn mean_keys<'a>(
    config: &EpsNetConfig,
    params: &Params,
    pairs: impl Iterator<Item = (&'a ConditioningStack, &'a ConditioningStack)> + Clone,
) -> Result<(usize, Vec<Tensor>), IntentError> {
    let mut data = BTreeMap::new();
    let batch = bind_conditions(config, pairs, &mut data)?;
    let mut g = Graph::new();
    let enc = build_encoder(&mut g, config, KeyMode::Mean);
    let ev = eval_graph(&g, &(params, &data))?;
    Ok((batch, enc.keys.iter().map(|&k| ev.value(k).clone()).collect()))
}

/// ε̂ for a batch given precomputed keys (as returned by [`mean_keys`]).
pub(crate) fn denoise_with_keys(
    config: &EpsNetConfig,
    params: &Params,
    schedule: &NoiseSchedule,
    keys: &[Tensor],
    y_t: &[VelocityWindow],
    steps: &[usize],
) -> Result<Vec<VelocityWindow>, IntentError> {
    let batch = y_t.len();
    if batch == 0 {
        return Err(IntentError::EmptyBatch);
    }
    let mut data = BTreeMap::new();
    bind_queries(config, schedule, y_t, steps, &mut data)?;
    let mut g = Graph::new();
    let key_nodes: Vec<NodeId> = (0..keys.len())
        .map(|l| {
            let name = format!("keys.{l}");
            data.insert(name.clone(), keys[l].clone());
            g.input(&name)
        })
        .collect();
    let out = build_denoiser(&mut g, config, &key_nodes, batch);
    let ev = eval_graph(&g, &(params, &data))?;
    Ok(split_windows(ev.value(out), config.horizon))
}

/// `ε_θ(y_t, t, A(F), A(τ))` with mean keys.
pub fn predict_noise(
    config: &EpsNetConfig,
    params: &Params,
    y_t: &VelocityWindow,
    t: usize,
    schedule: &NoiseSchedule,
    force: &ConditioningStack,
    torque: &ConditioningStack,
) -> Result<VelocityWindow, IntentError> {
    config.validate()?;
    let (_, keys) = mean_keys(config, params, std::iter::once((force, torque)))?;
    let mut out = denoise_with_keys(config, params, schedule, &keys, std::slice::from_ref(y_t), &[t])?;
    Ok(out.remove(0))
}

/// Training graph of one batch, bound and ready to evaluate.
pub(crate) struct LossGraph {
    pub graph: Graph,
    pub data: BTreeMap<String, Tensor>,
    pub diff: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
}

pub(crate) fn build_loss_graph(
    config: &EpsNetConfig,
    examples: &[IntentExample],
    schedule: &NoiseSchedule,
    noise: &NoiseBatch,
) -> Result<LossGraph, IntentError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(IntentError::EmptyBatch);
    }
    let batch = examples.len();
    if noise.steps.len() != batch || noise.eps.len() != batch || noise.key_draws.len() != config.levels {
        return Err(IntentError::Shape(format!(
            "noise for {} steps / {} windows / {} levels, batch has {batch} examples and {} levels",
            noise.steps.len(),
            noise.eps.len(),
            noise.key_draws.len(),
            config.levels
        )));
    }
    let mut data = BTreeMap::new();
    bind_conditions(config, examples.iter().map(|e| (&e.force, &e.torque)), &mut data)?;
    let mut noisy = Vec::with_capacity(batch);
    for ((ex, &t), eps) in examples.iter().zip(&noise.steps).zip(&noise.eps) {
        if t == 0 {
            return Err(IntentError::StepOutOfRange {
                t,
                steps: schedule.steps(),
            });
        }
        noisy.push(forward_diffuse(&ex.target, t, eps, schedule)?);
    }
    bind_queries(config, schedule, &noisy, &noise.steps, &mut data)?;
    let target: Vec<f64> = noise.eps.iter().flat_map(VelocityWindow::flat).collect();
    data.insert(
        "target.eps".into(),
        Tensor::new(vec![batch * config.horizon, 3], target)?,
    );
    for (l, u) in noise.key_draws.iter().enumerate() {
        data.insert(format!("latent.u.{l}"), u.clone());
    }

    let mut g = Graph::new();
    let enc = build_encoder(&mut g, config, KeyMode::Sampled);
    let eps_hat = build_denoiser(&mut g, config, &enc.keys, batch);
    let target = g.input("target.eps");
    let err = g.sub(eps_hat, target);
    let sq = g.square(err);
    let diff = g.mean(sq);
    let kl = build_kl(&mut g, &enc);
    let weighted = g.scale(kl, config.kl_weight);
    let total = g.add(diff, weighted);
    Ok(LossGraph {
        graph: g,
        data,
        diff,
        kl,
        total,
    })
}

pub(crate) fn loss_and_gradients(
    config: &EpsNetConfig,
    params: &Params,
    examples: &[IntentExample],
    schedule: &NoiseSchedule,
    noise: &NoiseBatch,
) -> Result<(LossBreakdown, Gradients), IntentError> {
    let lg = build_loss_graph(config, examples, schedule, noise)?;
    let ev = eval_graph(&lg.graph, &(params, &lg.data))?;
    let item = |n: NodeId| ev.value(n).data()[0];
    let losses = LossBreakdown {
        diff: item(lg.diff),
        kl: item(lg.kl),
        total: item(lg.total),
    };
    let grads = backward(&lg.graph, &ev, lg.total)?;
    Ok((losses, grads))
}

/// `L_diff`, `L_KL` and `L_total = L_diff + λ_KL·L_KL` of one batch.
pub fn diffusion_loss(
    config: &EpsNetConfig,
    params: &Params,
    examples: &[IntentExample],
    schedule: &NoiseSchedule,
    noise: &NoiseBatch,
) -> Result<LossBreakdown, IntentError> {
    let lg = build_loss_graph(config, examples, schedule, noise)?;
    let ev = eval_graph(&lg.graph, &(params, &lg.data))?;
    let item = |n: NodeId| ev.value(n).data()[0];
    Ok(LossBreakdown {
        diff: item(lg.diff),
        kl: item(lg.kl),
        total: item(lg.total),
    })
}
