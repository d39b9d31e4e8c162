//! Central finite-difference verification of tape gradients.
//!
//! The error reported for a tensor is
//! `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)`,
//! i.e. the worst elementwise discrepancy relative to the gradient's own
//! scale. Tensors whose gradient magnitude is below `1e-9` on both sides
//! are compared absolutely.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

const ABS_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<48} {:>5} elems  rel.err {:.3e}  {}",
                e.name,
                e.checked,
                e.max_rel_err,
                if e.pass { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Which elements of a tensor of `len` elements to probe.
fn probe_indices(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn entry(name: &str, analytic: &Tensor<f64>, numeric: &[(usize, f64)], tol: f64) -> GradCheckEntry {
    let scale = numeric
        .iter()
        .map(|&(_, n)| n.abs())
        .fold(analytic.max_abs(), f64::max);
    let worst = numeric
        .iter()
        .map(|&(i, n)| (analytic.data()[i] - n).abs())
        .fold(0.0, f64::max);
    let err = if scale < ABS_FLOOR {
        worst
    } else {
        worst / scale
    };
    GradCheckEntry {
        name: name.to_string(),
        max_rel_err: err,
        checked: numeric.len(),
        pass: err <= tol,
    }
}

/// Checks gradients of the scalar function `f` with respect to each named
/// input tensor. `limit` caps the number of probed elements per input.
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[(&str, Tensor<f64>)],
    h: f64,
    tol: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut numeric = Vec::new();
        for i in probe_indices(t.len(), limit, &mut rng) {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + h;
            let up = eval(&vals)?;
            vals[k].data_mut()[i] = orig - h;
            let down = eval(&vals)?;
            vals[k].data_mut()[i] = orig;
            numeric.push((i, (up - down) / (2.0 * h)));
        }
        report.entries.push(entry(name, &analytic, &numeric, tol));
    }
    Ok(report)
}

/// Checks gradients of a loss built from the parameters in `store`.
///
/// `f` receives a fresh training-mode graph for every evaluation; running
/// buffers are never committed so every evaluation sees the same state.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    h: f64,
    tol: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new(true);
    let loss = f(&mut g, store)?;
    g.backward_into(loss, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x7061_7261);
    let mut report = GradCheckReport::default();
    for k in 0..store.params().len() {
        let analytic = store.params()[k].grad.clone();
        let name = store.params()[k].name.clone();
        let mut numeric = Vec::new();
        for i in probe_indices(analytic.len(), limit, &mut rng) {
            let orig = store.params()[k].value.data()[i];
            store.params_mut()[k].value.data_mut()[i] = orig + h;
            let mut g = Graph::new(true);
            let l = f(&mut g, store)?;
            let up = g.value(l).data()[0];
            store.params_mut()[k].value.data_mut()[i] = orig - h;
            let mut g = Graph::new(true);
            let l = f(&mut g, store)?;
            let down = g.value(l).data()[0];
            store.params_mut()[k].value.data_mut()[i] = orig;
            numeric.push((i, (up - down) / (2.0 * h)));
        }
        report.entries.push(entry(&name, &analytic, &numeric, tol));
    }
    Ok(report)
}
