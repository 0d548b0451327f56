use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream, Var};

use super::store::{Ctx, LinearParams, ParamStore};

/// Scaled dot-product multi-head attention with separate key/value input
/// widths (link-attention feeds external token sets through here).
#[derive(Debug, Clone)]
pub struct MultiHeadAttentionParams {
    pub w_q: LinearParams,
    pub w_k: LinearParams,
    pub w_v: LinearParams,
    pub w_o: LinearParams,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttentionParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        prefix: &str,
        d_q_in: usize,
        d_k_in: usize,
        d_v_in: usize,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if d_model % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttentionParams {
            w_q: LinearParams::init(store, rng, &format!("{prefix}.q"), d_q_in, d_model),
            w_k: LinearParams::init(store, rng, &format!("{prefix}.k"), d_k_in, d_model),
            w_v: LinearParams::init(store, rng, &format!("{prefix}.v"), d_v_in, d_model),
            w_o: LinearParams::init(store, rng, &format!("{prefix}.o"), d_model, d_model),
            n_heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `q: [t_q, d_q_in]`, `k: [t_k, d_k_in]`, `v: [t_k, d_v_in]`.
/// `mask`, when present, is `t_q * t_k` row-major; `true` entries get zero
/// attention weight and every query row must keep at least one unmasked key.
pub fn multi_head_attention<T: Real>(
    ctx: &mut Ctx<T>,
    p: &MultiHeadAttentionParams,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let t_q = ctx.tape.shape(q)[0];
    let t_k = ctx.tape.shape(k)[0];
    if ctx.tape.shape(v)[0] != t_k {
        return Err(Error::Dimension(format!(
            "key/value counts disagree: {} vs {}",
            t_k,
            ctx.tape.shape(v)[0]
        )));
    }
    if let Some(m) = mask {
        if m.len() != t_q * t_k {
            return Err(Error::Dimension(format!(
                "mask has {} entries for {t_q}x{t_k} attention",
                m.len()
            )));
        }
        if m.chunks(t_k).any(|row| row.iter().all(|&b| b)) {
            return Err(Error::Contract("attention query row fully masked".into()));
        }
    }

    let qp = p.w_q.forward(ctx, q)?;
    let kp = p.w_k.forward(ctx, k)?;
    let vp = p.w_v.forward(ctx, v)?;

    let hd = p.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = ctx.tape.slice_cols(qp, h * hd, hd)?;
        let kh = ctx.tape.slice_cols(kp, h * hd, hd)?;
        let vh = ctx.tape.slice_cols(vp, h * hd, hd)?;
        let kht = ctx.tape.transpose(kh)?;
        let scores = ctx.tape.matmul(qh, kht)?;
        let scaled = ctx.tape.scale(scores, scale);
        let weights = ctx.tape.softmax_lastdim(scaled, mask)?;
        heads.push(ctx.tape.matmul(weights, vh)?);
    }
    let mut cat = heads[0];
    for &h in &heads[1..] {
        cat = ctx.tape.concat_cols(cat, h)?;
    }
    p.w_o.forward(ctx, cat)
}
