use super::{backward, eval_graph, Bindings, Graph, GraphError, NodeId, Params};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tol)
    }
}

/// Compares [`backward`] against central finite differences for every trainable
/// parameter of `graph` reachable through `params`.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, 1e-6·max(1, |f|))`
/// where `a` is the analytic and `n` the numeric derivative and `f` the output value;
/// the floor keeps round-off in near-zero derivatives from dominating.
pub fn grad_check<B: Bindings + ?Sized>(
    graph: &Graph,
    output: NodeId,
    params: &Params,
    data: &B,
    config: GradCheckConfig,
) -> Result<GradCheckReport, GraphError> {
    let eval = eval_graph(graph, &(params, data))?;
    let f0 = eval.value(output).data()[0];
    let analytic = backward(graph, &eval, output)?;
    let floor = 1e-6 * f0.abs().max(1.0);

    let mut work = params.clone();
    let mut checks = Vec::new();
    for name in graph.param_names() {
        let Some(grad) = analytic.get(&name) else { continue };
        let n = grad.len();
        let stride = config.max_entries.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(&name).unwrap().data()[i];
            let mut probe = |x: f64| -> Result<f64, GraphError> {
                work.get_mut(&name).unwrap().data_mut()[i] = x;
                let ev = eval_graph(graph, &(&work, data))?;
                Ok(ev.value(output).data()[0])
            };
            let plus = probe(orig + config.step)?;
            let minus = probe(orig - config.step)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            check.checked += 1;
            if rel > check.max_rel_err || rel.is_nan() {
                check.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_index = i;
            }
        }
        checks.push(check);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        tol: config.tol,
    })
}
