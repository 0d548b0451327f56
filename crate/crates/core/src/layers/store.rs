use crate::error::Result;
use crate::numerics::{Real, RngStream, Tape, Tensor, Var};

/// Handle to one named parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named parameter registry. Order is construction order and is
/// part of the determinism contract (init draws, checkpoint layout, and
/// optimizer state all follow it).
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter {name}"
        );
        t.requires_grad = true;
        self.entries.push((name, t));
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn N(0, 1/fan_in).
    pub fn dense(
        &mut self,
        name: impl Into<String>,
        rng: &mut RngStream,
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let std = (1.0 / fan_in as f64).sqrt();
        let mut w: Tensor<T> = rng.normal(vec![fan_in, fan_out]);
        for v in w.data_mut() {
            *v = *v * T::of(std);
        }
        self.add(name, w)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::filled(shape, T::one()))
    }

    /// Gaussian init with explicit std.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        rng: &mut RngStream,
        shape: Vec<usize>,
        std: f64,
    ) -> ParamId {
        let mut t: Tensor<T> = rng.normal(shape);
        for v in t.data_mut() {
            *v = *v * T::of(std);
        }
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Populate each parameter's `grad` field from a backward pass.
    /// Parameters that did not participate keep `grad = None`.
    pub fn record_grads(&mut self, grads: &GradMap<T>) {
        for (i, g) in grads.0.iter().enumerate() {
            self.entries[i].1.grad = g.clone();
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
        }
    }
}

/// Gradients aligned with [`ParamStore`] order.
pub struct GradMap<T: Real>(pub Vec<Option<Vec<T>>>);

/// Forward-pass context: the tape plus lazy parameter binding.
///
/// - train: parameters are differentiable leaves, dropout active
/// - eval: parameters are constants, dropout off
/// - diff: parameters are differentiable, dropout off (gradient checks)
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    params_differentiable: bool,
    dropout_rng: Option<&'a mut RngStream>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn train(store: &'a ParamStore<T>, dropout_rng: &'a mut RngStream) -> Self {
        Ctx {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
            params_differentiable: true,
            dropout_rng: Some(dropout_rng),
        }
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
            params_differentiable: false,
            dropout_rng: None,
        }
    }

    pub fn diff(store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
            params_differentiable: true,
            dropout_rng: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Bind a parameter onto the tape (memoized per ctx).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.params_differentiable {
            self.tape
                .leaf_data(t.shape().to_vec(), t.data().to_vec(), true)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Dropout that is active only in train mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_prob = 1.0 - rate;
        let n = self.tape.numel(x);
        let rng = match self.dropout_rng.as_mut() {
            Some(r) => r,
            None => return Ok(x),
        };
        let mask = rng.keep_mask(n, keep_prob);
        self.tape.dropout(x, &mask, keep_prob)
    }

    /// Run backward from `loss` and collect parameter gradients.
    pub fn collect_grads(&mut self, loss: Var) -> Result<GradMap<T>> {
        self.tape.backward(loss)?;
        let map = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(|g| g.to_vec())))
            .collect();
        Ok(GradMap(map))
    }
}

/// Dense projection with bias.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        LinearParams {
            w: store.dense(format!("{prefix}.w"), rng, fan_in, fan_out),
            b: store.zeros(format!("{prefix}.b"), vec![fan_out]),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row(y, b)
    }
}

/// Layer normalization over the last extent.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.ones(format!("{prefix}.gamma"), vec![dim]),
            beta: store.zeros(format!("{prefix}.beta"), vec![dim]),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.tape.layer_norm(x, g, b, T::of(self.eps))
    }
}

/// 1-d convolution over a `[t, c_in]` sequence.
#[derive(Debug, Clone)]
pub struct Conv1dParams {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let std = (1.0 / (c_in * kernel) as f64).sqrt();
        Conv1dParams {
            w: store.normal(format!("{prefix}.w"), rng, vec![c_out, c_in, kernel], std),
            b: store.zeros(format!("{prefix}.b"), vec![c_out]),
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ctx.tape.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_bind_once_per_ctx() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngStream::new(1, "init");
        let id = store.dense("w", &mut rng, 3, 3);
        let mut dr = RngStream::new(1, "dropout");
        let mut ctx = Ctx::train(&store, &mut dr);
        let a = ctx.p(id);
        let b = ctx.p(id);
        assert_eq!(a, b);
        assert_eq!(ctx.tape.len(), 1);
    }

    #[test]
    fn eval_binding_takes_no_grad() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngStream::new(1, "init");
        let lin = LinearParams::init(&mut store, &mut rng, "lin", 2, 2);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.leaf_data(vec![1, 2], vec![1.0, 2.0], false);
        let y = lin.forward(&mut ctx, x).unwrap();
        let s = ctx.tape.sum_all(y);
        let grads = ctx.collect_grads(s).unwrap();
        assert!(grads.0.iter().all(|g| g.is_none()));
    }
}
