//! Central finite-difference oracle for reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default central-difference step for 64-bit floats.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryError {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Per-entry comparison of analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    pub max_rel_error: f64,
    pub entries: Vec<EntryError>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn worst(&self) -> Option<&EntryError> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn sample_indices(n: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(k) if k < n => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
        _ => (0..n).collect(),
    }
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::contract(alloc::format!(
            "gradcheck needs a scalar-valued function, got {} values",
            t.numel()
        )));
    }
    Ok(t.data()[0])
}

fn compare<V, G>(inputs: &[Tensor], value_at: V, analytic: G, step: f64, tol: f64, max_entries: Option<usize>) -> Result<GradReport>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: FnOnce() -> Result<Vec<Tensor>>,
{
    let grads = analytic()?;
    let mut entries = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in sample_indices(input.numel(), max_entries) {
            let x0 = input.data()[idx];
            work[k].data_mut()[idx] = x0 + step;
            let fp = value_at(&work)?;
            work[k].data_mut()[idx] = x0 - step;
            let fm = value_at(&work)?;
            work[k].data_mut()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grads[k].data()[idx];
            entries.push(EntryError { input: k, index: idx, analytic: a, numeric, rel_error: rel_error(a, numeric) });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradReport { tol, max_rel_error, entries })
}

/// Check `f` against central differences with respect to every entry of
/// every input.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_sampled(f, inputs, step, tol, None)
}

/// As [`gradcheck`], visiting at most `max_entries` evenly spaced entries
/// per input.
pub fn gradcheck_sampled<F>(f: F, inputs: &[Tensor], step: f64, tol: f64, max_entries: Option<usize>) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let value_at = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let analytic = || {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)?;
        let grads = g.backward(out)?;
        Ok(vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect())
    };
    compare(inputs, value_at, analytic, step, tol, max_entries)
}

/// Check `f` with respect to selected parameters of `store`. The graph
/// handed to `f` has the whole store bound.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    step: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let inputs: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let value_at = |xs: &[Tensor]| {
        let mut s = store.clone();
        for (&id, t) in ids.iter().zip(xs) {
            s.set(id, t.clone())?;
        }
        let mut g = Graph::with_params(&s);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };
    let analytic = || {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        scalar_of(&g, out)?;
        let grads = g.backward(out)?;
        Ok(ids
            .iter()
            .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec())))
            .collect())
    };
    compare(&inputs, value_at, analytic, step, tol, max_entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn([3, 2], |i| i as f64 * 0.3 - 0.7);
        let r = gradcheck(|g, v| g.sum(v[0]), &[x], DEFAULT_STEP, 1e-6).unwrap();
        assert!(r.passed());
        assert!(r.entries.iter().all(|e| e.analytic == 1.0));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_scalar_is_contract_error() {
        let x = Tensor::zeros([2]);
        let r = gradcheck(|g, v| g.tanh(v[0]), &[x], DEFAULT_STEP, 1e-6);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        // the difference stencil straddles the kink of |x|
        let x = Tensor::vector(alloc::vec![1e-6]);
        let r = gradcheck(|g, v| { let a = g.abs(v[0])?; g.sum(a) }, &[x], 1e-5, 1e-6).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn sampling_limits_entries() {
        let x = Tensor::zeros([100]);
        let r = gradcheck_sampled(|g, v| g.sum(v[0]), &[x], DEFAULT_STEP, 1e-6, Some(7)).unwrap();
        assert_eq!(r.entries.len(), 7);
    }
}
