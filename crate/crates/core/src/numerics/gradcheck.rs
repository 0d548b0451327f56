use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `eps`. `f` must produce a scalar.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    let xv = tape.leaf(&leaf);
    let y = f(&mut tape, xv)?;
    if tape.numel(y) != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(pt);
        let y = f(&mut t, v)?;
        Ok(t.scalar(y))
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

/// Gradient check of a scalar function of several tensors, checking each
/// argument in turn while the others stay fixed. Returns the max relative
/// error over all coordinates of all arguments.
pub fn grad_check_multi<F>(f: F, args: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = args
        .iter()
        .map(|a| {
            let mut t = a.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let y = f(&mut tape, &vars)?;
    if tape.numel(y) != 1 {
        return Err(Error::Contract(format!(
            "grad_check_multi needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(args)
        .map(|(&v, a)| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; a.numel()],
        })
        .collect();

    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p)).collect();
        let y = f(&mut t, &vs)?;
        Ok(t.scalar(y))
    };

    let mut probe: Vec<Tensor<f64>> = args.to_vec();
    let mut max_err: f64 = 0.0;
    for ai in 0..args.len() {
        for i in 0..args[ai].numel() {
            let orig = probe[ai].data()[i];
            probe[ai].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[ai].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[ai].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ai][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}
