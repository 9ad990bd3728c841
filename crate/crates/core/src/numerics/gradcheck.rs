//! Central finite-difference gradient checking (64-bit only).

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn finite(v: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Max relative error between the analytic gradient of `f` with respect to `inputs` and
/// central differences with step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    finite(g.scalar(out), || "forward output".into())?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let a = finite(analytic[i], || format!("analytic grad input {k} element {i}"))?;
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = finite(eval(&probe)?, || format!("f(x+h) input {k} element {i}"))?;
            probe[k].data_mut()[i] = orig - h;
            let down = finite(eval(&probe)?, || format!("f(x-h) input {k} element {i}"))?;
            probe[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

/// Gradient check over the weights of a parameter store. At most `max_per_param` evenly
/// spaced elements of each weight are probed.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    max_per_param: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    finite(g.scalar(out), || "forward output".into())?;
    g.backward(out)?;
    let grads = g.param_grads();
    let analytic = |id: ParamId| grads.iter().find(|(g, _)| *g == id).map(|(_, v)| v.as_slice());

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.weight_ids() {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let a = analytic(id).map_or(0.0, |s| s[i]);
            let a = finite(a, || format!("analytic grad {}[{i}]", store.name(id)))?;
            let orig = store.get(id).data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let out = f(&mut g, &probe)?;
                Ok(g.scalar(out))
            };
            let up = finite(eval(orig + h)?, || format!("f(x+h) {}[{i}]", store.name(id)))?;
            let down = finite(eval(orig - h)?, || format!("f(x-h) {}[{i}]", store.name(id)))?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}
