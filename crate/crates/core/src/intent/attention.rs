use std::collections::BTreeMap;

use crate::autodiff::{eval_graph, Graph, NodeId, Tensor};

use super::IntentError;

/// Offset inside `log` so that zero attention entries contribute `0·log(tiny) = 0`
/// to the entropy instead of `0·(−∞)`.
pub(crate) const ENTROPY_FLOOR: f64 = f64::MIN_POSITIVE;

/// Softmax attention of `q` over `k` followed by the value read-out.
///
/// `q`: `[N, Q, d]`, `k`/`v`: `[N, S, d]`. Returns `(attention [N, Q, S], context [N, Q, d])`.
pub(crate) fn attend(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, width: usize) -> (NodeId, NodeId) {
    let logits = g.matmul_nt(q, k);
    let logits = g.scale(logits, 1.0 / (width as f64).sqrt());
    let attn = g.softmax(logits);
    let ctx = g.matmul(attn, v);
    (attn, ctx)
}

/// Shannon entropy (nats) of each attention row, keeping the last axis with length one.
pub(crate) fn row_entropy(g: &mut Graph, attn: NodeId, last_axis: usize) -> NodeId {
    let floor = g.constant(Tensor::scalar(ENTROPY_FLOOR));
    let shifted = g.add(attn, floor);
    let log = g.log(shifted);
    let plogp = g.mul(attn, log);
    let s = g.sum_axis(plogp, last_axis);
    g.scale(s, -1.0)
}

/// Level weights `w_ℓ ∝ exp(−H_ℓ)` from per-level entropies concatenated on `last_axis`.
pub(crate) fn weights_from_entropies(g: &mut Graph, entropies: &[NodeId], last_axis: usize) -> NodeId {
    let stacked = g.concat(entropies, last_axis);
    let neg = g.scale(stacked, -1.0);
    g.softmax(neg)
}

/// Mixes per-level contexts with the level weights: `Σ_ℓ w_ℓ · ctx_ℓ`.
pub(crate) fn mix_levels(g: &mut Graph, weights: NodeId, contexts: &[NodeId], last_axis: usize) -> NodeId {
    let mut acc = None;
    for (l, &ctx) in contexts.iter().enumerate() {
        let w = g.slice(weights, last_axis, l, l + 1);
        let term = g.mul(w, ctx);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    acc.expect("at least one level")
}

fn check_rows(rows: &Tensor, level: usize) -> Result<(usize, usize), IntentError> {
    if rows.ndim() != 2 {
        return Err(IntentError::Attention(format!(
            "level {level}: expected a 2-D row-stochastic matrix, got shape {:?}",
            rows.shape()
        )));
    }
    let (q, s) = (rows.shape()[0], rows.shape()[1]);
    for (i, row) in rows.data().chunks(s).enumerate() {
        if let Some(v) = row.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(IntentError::Attention(format!(
                "level {level}, row {i}: invalid entry {v}"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(IntentError::Attention(format!(
                "level {level}, row {i}: sums to {total}"
            )));
        }
    }
    Ok((q, s))
}

/// Entropy-based level weights for each query.
///
/// `levels[ℓ]` is a `Q × S` row-stochastic matrix; the result is `Q × L` with
/// `w[i, ℓ] ∝ exp(−H(levels[ℓ][i, :]))`, normalized across levels.
pub fn entropy_weights(levels: &[Tensor]) -> Result<Tensor, IntentError> {
    if levels.is_empty() {
        return Err(IntentError::Attention("no levels".into()));
    }
    let mut dims = None;
    for (l, rows) in levels.iter().enumerate() {
        let d = check_rows(rows, l)?;
        if dims.is_some_and(|prev: (usize, usize)| prev.0 != d.0) {
            return Err(IntentError::Attention("levels disagree on query count".into()));
        }
        dims = Some(d);
    }
    let mut g = Graph::new();
    let mut bindings = BTreeMap::new();
    let entropies: Vec<NodeId> = levels
        .iter()
        .enumerate()
        .map(|(l, rows)| {
            let name = format!("attn.{l}");
            bindings.insert(name.clone(), rows.clone());
            let a = g.input(&name);
            row_entropy(&mut g, a, 1)
        })
        .collect();
    let w = weights_from_entropies(&mut g, &entropies, 1);
    Ok(eval_graph(&g, &bindings)?.value(w).clone())
}

/// Result of [`multiscale_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleAttention {
    /// `Q × d` mixed context.
    pub context: Tensor,
    /// `Q × S` mixed attention `Ã = Σ_ℓ w_ℓ·softmax(q·k_ℓᵀ/√d)`.
    pub attention: Tensor,
    /// Per-level attention rows.
    pub levels: Vec<Tensor>,
}

/// Scaled dot-product attention of `queries` (`Q × d`) against per-level keys and
/// values (`S × d` each), mixed with per-query level `weights` (`Q × L`).
pub fn multiscale_attention(
    queries: &Tensor,
    keys: &[Tensor],
    values: &[Tensor],
    weights: &Tensor,
) -> Result<MultiscaleAttention, IntentError> {
    let levels = keys.len();
    if levels == 0 || values.len() != levels {
        return Err(IntentError::Attention(format!(
            "{} key levels vs {} value levels",
            keys.len(),
            values.len()
        )));
    }
    if queries.ndim() != 2 {
        return Err(IntentError::Attention("queries must be Q × d".into()));
    }
    let (nq, width) = (queries.shape()[0], queries.shape()[1]);
    for (l, (k, v)) in keys.iter().zip(values).enumerate() {
        if k.ndim() != 2 || k.shape()[1] != width || v.ndim() != 2 || v.shape()[0] != k.shape()[0] {
            return Err(IntentError::Attention(format!(
                "level {l}: keys {:?} / values {:?} incompatible with width {width}",
                k.shape(),
                v.shape()
            )));
        }
    }
    if weights.shape() != [nq, levels] {
        return Err(IntentError::Attention(format!(
            "weights must be {nq} x {levels}, got {:?}",
            weights.shape()
        )));
    }
    let mut g = Graph::new();
    let mut b = BTreeMap::new();
    b.insert("q".to_string(), queries.clone().reshaped(vec![1, nq, width])?);
    b.insert("w".to_string(), weights.clone().reshaped(vec![1, nq, levels])?);
    let q = g.input("q");
    let w = g.input("w");
    let mut attns = Vec::new();
    let mut ctxs = Vec::new();
    for l in 0..levels {
        let (s, dv) = (keys[l].shape()[0], values[l].shape()[1]);
        b.insert(format!("k.{l}"), keys[l].clone().reshaped(vec![1, s, width])?);
        b.insert(format!("v.{l}"), values[l].clone().reshaped(vec![1, s, dv])?);
        let k = g.input(&format!("k.{l}"));
        let v = g.input(&format!("v.{l}"));
        let (a, c) = attend(&mut g, q, k, v, width);
        attns.push(a);
        ctxs.push(c);
    }
    let ctx = mix_levels(&mut g, w, &ctxs, 2);
    let mixed = mix_levels(&mut g, w, &attns, 2);
    let ev = eval_graph(&g, &b)?;
    let squeeze = |t: &Tensor| {
        let s = t.shape();
        t.clone().reshaped(vec![s[1], s[2]])
    };
    Ok(MultiscaleAttention {
        context: squeeze(ev.value(ctx))?,
        attention: squeeze(ev.value(mixed))
            .map_err(|_| IntentError::Attention("levels must share the key count to mix attention rows".into()))?,
        levels: attns.iter().map(|a| squeeze(ev.value(*a))).collect::<Result<_, _>>()?,
    })
}
