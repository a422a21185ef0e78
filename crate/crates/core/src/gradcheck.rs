//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient entries smaller than this are compared absolutely rather than
/// relatively; below it central differences are dominated by rounding.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Comparison of one gradient tensor against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, GRAD_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of one tensor.
pub fn numerical_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Which parameter entries to check.
#[derive(Debug, Clone)]
pub struct ParamSelection {
    pub id: ParamId,
    /// Flat indices into the parameter tensor; `None` checks every entry.
    pub indices: Option<Vec<usize>>,
}

impl ParamSelection {
    pub fn all(id: ParamId) -> Self {
        ParamSelection { id, indices: None }
    }
}

fn eval_root<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.value(root).data()[0];
    if !v.is_finite() {
        return Err(Error::numeric("gradient check", "non-finite objective"));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar built by `f` with central
/// differences, for every input tensor and for the selected parameters.
/// Parameters are perturbed in place and restored.
pub fn check_graph<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    params: &[ParamSelection],
    h: f64,
    f: F,
) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (input_grads, param_grads) = {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        let bw = g.backward(root)?;
        let ig: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| bw.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        let pg: Vec<Tensor> = params
            .iter()
            .map(|sel| {
                bw.params()
                    .get(sel.id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(sel.id).shape().to_vec()))
            })
            .collect();
        (ig, pg)
    };

    let mut out = Vec::new();
    for (i, analytic) in input_grads.iter().enumerate() {
        let mut probe = inputs.to_vec();
        let numeric = numerical_gradient(&inputs[i], h, |x| {
            probe[i] = x.clone();
            eval_root(store, &probe, &f)
        })?;
        out.push(GradComparison {
            name: format!("input[{i}]"),
            max_rel_error: relative_error(analytic.data(), numeric.data()),
            entries: analytic.len(),
        });
    }
    for (sel, analytic) in params.iter().zip(&param_grads) {
        let indices: Vec<usize> = sel.indices.clone().unwrap_or_else(|| (0..analytic.len()).collect());
        let mut a = Vec::with_capacity(indices.len());
        let mut n = Vec::with_capacity(indices.len());
        for &j in &indices {
            let orig = store.get(sel.id).data()[j];
            store.get_mut(sel.id).data_mut()[j] = orig + h;
            let fp = eval_root(store, inputs, &f);
            store.get_mut(sel.id).data_mut()[j] = orig - h;
            let fm = eval_root(store, inputs, &f);
            store.get_mut(sel.id).data_mut()[j] = orig;
            a.push(analytic.data()[j]);
            n.push((fp? - fm?) / (2.0 * h));
        }
        out.push(GradComparison {
            name: store.name(sel.id).to_string(),
            max_rel_error: relative_error(&a, &n),
            entries: indices.len(),
        });
    }
    Ok(out)
}

/// Largest relative error over a set of comparisons.
pub fn worst(comparisons: &[GradComparison]) -> f64 {
    comparisons.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}
