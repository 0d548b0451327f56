//! Neural building blocks: multi-head attention, feed-forward transformer
//! blocks, link-attention blocks, cross-attention modules with token mixer,
//! Conv-FFN, and the convolutional variance predictor.

pub mod attention;
pub mod blocks;
pub mod gradcheck;
pub mod predictor;
pub mod store;

pub use attention::{multi_head_attention, MultiHeadAttentionParams};
pub use blocks::{
    conv_ffn, cross_attention_module, fft_block, link_attention_block, ConvFfnParams,
    CrossAttentionModuleParams, FftBlockParams, LinkAttentionBlockParams,
};
pub use gradcheck::grad_check_layer;
pub use predictor::{variance_predictor, VariancePredictorParams};
pub use store::{Conv1dParams, Ctx, GradMap, LayerNormParams, LinearParams, ParamId, ParamStore};

use crate::numerics::{Real, Tensor};

/// Sinusoidal absolute positional encoding table, `[len, d]`.
pub fn positional_encoding<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("table shape")
}
