//! Central finite-difference checks of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Outcome of a check: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖,
/// floor)` over every probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Tensor contributing the largest share of the error.
    pub worst: String,
    pub coords: usize,
}

/// Finite-difference settings; `eps` applies in the reference precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per tensor, evenly strided.
    pub max_coords: usize,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self::new()
    }
}

impl GradCheck {
    pub fn new() -> Self {
        Self { eps: 1e-6, max_coords: 24, floor: 1e-12 }
    }

    fn probes(&self, n: usize) -> Vec<usize> {
        let m = self.max_coords.min(n).max(1);
        (0..m).map(|i| i * n / m).collect()
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn summarize(pairs: Vec<(String, Vec<f64>, Vec<f64>)>, floor: f64) -> GradReport {
    let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut worst = (String::new(), -1.0);
    let mut coords = 0;
    for (name, a, n) in pairs {
        let d: f64 = a.iter().zip(&n).map(|(x, y)| (x - y).powi(2)).sum();
        if d > worst.1 {
            worst = (name, d);
        }
        d2 += d;
        a2 += norm_sq(&a);
        n2 += norm_sq(&n);
        coords += a.len();
    }
    let e = d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
    GradReport { max_rel_err: e, worst: worst.0, coords }
}

fn scalar_loss<T: Scalar>(g: &Graph<T>, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Dimension(format!("loss has shape {:?}", v.shape())));
    }
    Ok(v.item().to_f64_lossy())
}

fn analytic_inputs<T: Scalar>(inputs: &[Tensor<T>], f: &dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::unchecked();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(|s| s.iter().map(|x| x.to_f64_lossy()).collect()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

fn analytic_params<T: Scalar>(
    store: &mut ParamStore<T>,
    f: &dyn Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
) -> Result<Vec<(ParamId, Vec<f64>)>> {
    store.zero_grads();
    let mut g = Graph::unchecked();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let out = ids
        .into_iter()
        .map(|id| {
            let len = store.value(id).numel();
            let grad = store.grad(id).map(|s| s.iter().map(|x| x.to_f64_lossy()).collect()).unwrap_or_else(|| vec![0.0; len]);
            (id, grad)
        })
        .collect();
    store.zero_grads();
    Ok(out)
}

/// Checks gradients with respect to input leaves built from `inputs`.
pub fn check_inputs<T: Scalar>(
    inputs: &[Tensor<T>],
    cfg: GradCheck,
    f: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    check_inputs_against(inputs, &f, &f, cfg)
}

/// Analytic input gradients of `f` (precision `T`) against central
/// differences of `reference` evaluated in precision `R` at the same values.
pub fn check_inputs_against<T: Scalar, R: Scalar>(
    inputs: &[Tensor<T>],
    f: &dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    reference: &dyn Fn(&mut Graph<R>, &[Var]) -> Result<Var>,
    cfg: GradCheck,
) -> Result<GradReport> {
    let analytic = analytic_inputs(inputs, f)?;
    let base: Vec<Tensor<R>> = inputs.iter().map(|t| t.cast()).collect();
    let eval = |ts: &[Tensor<R>]| -> Result<f64> {
        let mut g = Graph::unchecked();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = reference(&mut g, &vars)?;
        scalar_loss(&g, loss)
    };
    let mut pairs = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for c in cfg.probes(base[i].numel()) {
            let mut ts = base.clone();
            let x0 = ts[i].data()[c];
            ts[i].data_mut()[c] = x0 + lit(cfg.eps);
            let lp = eval(&ts)?;
            ts[i].data_mut()[c] = x0 - lit(cfg.eps);
            let lm = eval(&ts)?;
            n.push((lp - lm) / (2.0 * cfg.eps));
            a.push(grad[c]);
        }
        pairs.push((format!("input {i}"), a, n));
    }
    Ok(summarize(pairs, cfg.floor))
}

/// Checks gradients of every trainable parameter in `store`.
pub fn check_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: GradCheck,
    f: impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
) -> Result<GradReport> {
    let mut reference = store.clone();
    check_params_against(store, &f, &mut reference, &f, cfg)
}

/// Analytic parameter gradients of `f` against central differences of
/// `reference`, whose store is first overwritten with the values of `store`.
pub fn check_params_against<T: Scalar, R: Scalar>(
    store: &mut ParamStore<T>,
    f: &dyn Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
    reference_store: &mut ParamStore<R>,
    reference: &dyn Fn(&mut Graph<R>, &ParamStore<R>) -> Result<Var>,
    cfg: GradCheck,
) -> Result<GradReport> {
    if store.len() != reference_store.len() {
        return Err(Error::Contract("reference store has a different parameter set".into()));
    }
    for id in store.ids() {
        let rid = reference_store
            .id(store.name(id))
            .ok_or_else(|| Error::Contract(format!("reference lacks {}", store.name(id))))?;
        *reference_store.value_mut(rid) = store.value(id).cast();
    }
    let analytic = analytic_params(store, f)?;
    let eval = |s: &ParamStore<R>| -> Result<f64> {
        let mut g = Graph::unchecked();
        let loss = reference(&mut g, s)?;
        scalar_loss(&g, loss)
    };
    let mut pairs = Vec::new();
    for (id, grad) in analytic {
        let name = store.name(id).to_string();
        let rid = reference_store.id(&name).expect("checked above");
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for c in cfg.probes(grad.len()) {
            let x0 = reference_store.value(rid).data()[c];
            reference_store.value_mut(rid).data_mut()[c] = x0 + lit(cfg.eps);
            let lp = eval(reference_store)?;
            reference_store.value_mut(rid).data_mut()[c] = x0 - lit(cfg.eps);
            let lm = eval(reference_store)?;
            reference_store.value_mut(rid).data_mut()[c] = x0;
            n.push((lp - lm) / (2.0 * cfg.eps));
            a.push(grad[c]);
        }
        pairs.push((name, a, n));
    }
    Ok(summarize(pairs, cfg.floor))
}
