use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::numerics::Real;

/// Layer-wise adaptive moments: Adam-style moment estimates with a
/// per-tensor trust ratio `|w| / |update|` scaling the learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub trust_clip: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-6,
            trust_clip: 10.0,
        }
    }
}

/// First/second moments per parameter tensor, aligned with store order.
#[derive(Debug, Clone, PartialEq)]
pub struct LambState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> LambState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.numel()])
            .collect::<Vec<_>>();
        LambState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One optimizer step over every parameter carrying a gradient. Rejects the
/// whole step if any gradient is non-finite; nothing is mutated in that case.
pub fn lamb_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut LambState<T>,
    lr: f64,
    cfg: &LambConfig,
) -> Result<()> {
    for (_, name, t) in store.iter() {
        if let Some(g) = &t.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient on {name}; step rejected"
                )));
            }
        }
    }

    state.step += 1;
    let t_step = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t_step);
    let bc2 = 1.0 - cfg.beta2.powi(t_step);
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one_m_b1 = T::of(1.0 - cfg.beta1);
    let one_m_b2 = T::of(1.0 - cfg.beta2);

    let count = store.len();
    for idx in 0..count {
        let id = crate::layers::ParamId(idx);
        let Some(grad) = store.get(id).grad.clone() else {
            continue;
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((m, v), &g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
        }

        let param = store.get_mut(id);
        let data = param.data_mut();
        let mut update = vec![T::zero(); data.len()];
        let wd = T::of(cfg.weight_decay);
        let eps = T::of(cfg.eps);
        let ibc1 = T::of(1.0 / bc1);
        let ibc2 = T::of(1.0 / bc2);
        for i in 0..data.len() {
            let m_hat = m[i] * ibc1;
            let v_hat = v[i] * ibc2;
            update[i] = m_hat / (v_hat.sqrt() + eps) + wd * data[i];
        }

        let w_norm = l2_norm(data);
        let u_norm = l2_norm(&update);
        let trust = if w_norm > 0.0 && u_norm > 0.0 {
            (w_norm / u_norm).min(cfg.trust_clip)
        } else {
            1.0
        };
        let scale = T::of(lr * trust);
        for (w, u) in data.iter_mut().zip(&update) {
            *w = *w - scale * *u;
        }
    }
    Ok(())
}

/// Scale all gradients so the global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq_sum = 0.0f64;
    for (_, _, t) in store.iter() {
        if let Some(g) = &t.grad {
            sq_sum += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let total = sq_sum.sqrt();
    if total > max_norm && total > 0.0 {
        let scale = T::of(max_norm / total);
        let count = store.len();
        for idx in 0..count {
            let id = crate::layers::ParamId(idx);
            if let Some(g) = &mut store.get_mut(id).grad {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    total
}

fn l2_norm<T: Real>(v: &[T]) -> f64 {
    v.iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}
