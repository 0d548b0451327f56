use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

use super::store::{Ctx, ParamStore};

/// Finite-difference check of a scalar function of a parameter store plus
/// free input tensors. The analytic gradient comes from one backward pass in
/// `diff` mode (dropout off); numeric gradients perturb every coordinate of
/// every parameter and every input. Returns the max relative error.
pub fn grad_check_layer<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
{
    let mut ctx = Ctx::diff(store);
    let in_vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            ctx.tape
                .leaf_data(t.shape().to_vec(), t.data().to_vec(), true)
        })
        .collect();
    let y = f(&mut ctx, &in_vars)?;
    if ctx.tape.numel(y) != 1 {
        return Err(Error::Contract(format!(
            "grad_check_layer needs a scalar, got {:?}",
            ctx.tape.shape(y)
        )));
    }
    let param_grads = ctx.collect_grads(y)?;
    let input_grads: Vec<Vec<f64>> = in_vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            ctx.tape
                .grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut ctx = Ctx::eval(s);
        let vars: Vec<Var> = ins.iter().map(|t| ctx.tape.constant(t)).collect();
        let y = f(&mut ctx, &vars)?;
        Ok(ctx.tape.scalar(y))
    };

    // Floor the denominator at 1e-4: coordinates with structurally zero
    // gradients (e.g. key biases under softmax shift invariance) carry only
    // roundoff on both sides and would otherwise report relative error 1.
    let mut max_err: f64 = 0.0;
    let mut rel = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        max_err = max_err.max((analytic - numeric).abs() / denom);
    };

    let mut probe_store = store.clone();
    for (id, _, t) in store.iter() {
        let n = t.numel();
        for i in 0..n {
            let orig = probe_store.get(id).data()[i];
            probe_store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe_store, inputs)?;
            probe_store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe_store, inputs)?;
            probe_store.get_mut(id).data_mut()[i] = orig;
            let analytic = param_grads.0[id.0]
                .as_ref()
                .map(|g| g[i])
                .unwrap_or(0.0);
            rel(analytic, (up - down) / (2.0 * eps));
        }
    }

    let mut probe_inputs = inputs.to_vec();
    for (ai, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = probe_inputs[ai].data()[i];
            probe_inputs[ai].data_mut()[i] = orig + eps;
            let up = eval(store, &probe_inputs)?;
            probe_inputs[ai].data_mut()[i] = orig - eps;
            let down = eval(store, &probe_inputs)?;
            probe_inputs[ai].data_mut()[i] = orig;
            rel(input_grads[ai][i], (up - down) / (2.0 * eps));
        }
    }
    Ok(max_err)
}
