use crate::error::Result;
use crate::numerics::{Real, RngStream, Var};

use super::store::{Conv1dParams, Ctx, LayerNormParams, ParamStore};

/// Per-position scalar predictor shared by the duration, pitch, and energy
/// heads: two kernel-3 convolutions with rectifier, layer-norm, and dropout,
/// then a kernel-3 convolution down to one channel.
///
/// The single-channel output stage is a plain linear head: rectifying it
/// would clip negative pitch/energy targets, and a layer-norm over a
/// one-channel feature is constant by construction.
#[derive(Debug, Clone)]
pub struct VariancePredictorParams {
    pub conv1: Conv1dParams,
    pub conv2: Conv1dParams,
    pub conv3: Conv1dParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub dropout: f64,
}

impl VariancePredictorParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        dropout: f64,
    ) -> Self {
        VariancePredictorParams {
            conv1: Conv1dParams::init(store, rng, &format!("{prefix}.conv1"), d_in, hidden, 3, 1, 1),
            conv2: Conv1dParams::init(store, rng, &format!("{prefix}.conv2"), hidden, hidden, 3, 1, 1),
            conv3: Conv1dParams::init(store, rng, &format!("{prefix}.conv3"), hidden, 1, 3, 1, 1),
            ln1: LayerNormParams::init(store, &format!("{prefix}.ln1"), hidden),
            ln2: LayerNormParams::init(store, &format!("{prefix}.ln2"), hidden),
            dropout,
        }
    }
}

/// `x: [t, d]` -> `[t]`, one scalar per position.
pub fn variance_predictor<T: Real>(
    ctx: &mut Ctx<T>,
    p: &VariancePredictorParams,
    x: Var,
) -> Result<Var> {
    let h = p.conv1.forward(ctx, x)?;
    let h = ctx.tape.relu(h);
    let h = p.ln1.forward(ctx, h)?;
    let h = ctx.dropout(h, p.dropout)?;
    let h = p.conv2.forward(ctx, h)?;
    let h = ctx.tape.relu(h);
    let h = p.ln2.forward(ctx, h)?;
    let h = ctx.dropout(h, p.dropout)?;
    let out = p.conv3.forward(ctx, h)?;
    // [t, 1] -> [t]
    ctx.tape.sum_lastdim(out)
}
