//! Sublayers shared by the transformer stacks of the frontend and the
//! acoustic model, resolved by slot prefix from a [`ParamStore`].

use crate::params::{Param, ParamError, ParamStore};
use crate::quant::qconv1d;
use crate::tensor::{
    add_in_place, attend, conv1d, layer_norm, linear, relu_in_place, AttentionParams, LayerKv, Mask, Projection,
    Tensor, TensorError, LAYER_NORM_EPS,
};

pub struct Norm<'a> {
    gamma: &'a Tensor<f32>,
    beta: &'a Tensor<f32>,
}

impl<'a> Norm<'a> {
    pub fn resolve(store: &'a ParamStore, prefix: &str, d: usize) -> Result<Self, ParamError> {
        store.shaped(&format!("{prefix}.gamma"), &[d])?;
        store.shaped(&format!("{prefix}.beta"), &[d])?;
        Ok(Norm { gamma: store.dense(&format!("{prefix}.gamma"))?, beta: store.dense(&format!("{prefix}.beta"))? })
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS as f32)
    }

    /// `LN(x + y)`, the post-norm residual connection.
    pub fn residual(&self, mut x: Tensor<f32>, y: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        add_in_place(&mut x, y)?;
        self.apply(&x)
    }
}

/// Projection weight plus bias, looked up as `{prefix}.{w}` / `{prefix}.{b}`.
pub fn resolve_linear<'a>(
    store: &'a ParamStore,
    w_slot: &str,
    b_slot: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<(&'a dyn Projection<f32>, &'a Tensor<f32>), ParamError> {
    store.shaped(w_slot, &[in_dim, out_dim])?;
    store.shaped(b_slot, &[out_dim])?;
    Ok((store.projection(w_slot)?, store.dense(b_slot)?))
}

pub struct FeedForward<'a> {
    w1: &'a dyn Projection<f32>,
    b1: &'a Tensor<f32>,
    w2: &'a dyn Projection<f32>,
    b2: &'a Tensor<f32>,
}

impl<'a> FeedForward<'a> {
    pub fn resolve(store: &'a ParamStore, prefix: &str, d: usize, inner: usize) -> Result<Self, ParamError> {
        let (w1, b1) = resolve_linear(store, &format!("{prefix}.w1"), &format!("{prefix}.b1"), d, inner)?;
        let (w2, b2) = resolve_linear(store, &format!("{prefix}.w2"), &format!("{prefix}.b2"), inner, d)?;
        Ok(FeedForward { w1, b1, w2, b2 })
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        let mut h = linear(x, self.w1, Some(self.b1))?;
        relu_in_place(h.data_mut());
        linear(&h, self.w2, Some(self.b2))
    }
}

pub const ATTENTION_WEIGHTS: [&str; 4] = ["wq", "wk", "wv", "wo"];
pub const ATTENTION_BIASES: [&str; 4] = ["bq", "bk", "bv", "bo"];

pub fn resolve_attention<'a>(
    store: &'a ParamStore,
    prefix: &str,
    d: usize,
) -> Result<AttentionParams<'a, f32>, ParamError> {
    let w = |n: &str| -> Result<&'a dyn Projection<f32>, ParamError> {
        let slot = format!("{prefix}.{n}");
        store.shaped(&slot, &[d, d])?;
        store.projection(&slot)
    };
    let b = |n: &str| -> Result<&'a Tensor<f32>, ParamError> {
        let slot = format!("{prefix}.{n}");
        store.shaped(&slot, &[d])?;
        store.dense(&slot)
    };
    Ok(AttentionParams {
        wq: w("wq")?,
        wk: w("wk")?,
        wv: w("wv")?,
        wo: w("wo")?,
        bq: b("bq")?,
        bk: b("bk")?,
        bv: b("bv")?,
        bo: b("bo")?,
    })
}

/// Attention of `q_in` over keys and values projected once in advance.
pub fn attend_memory(
    q_in: &Tensor<f32>,
    memory: &LayerKv<f32>,
    params: &AttentionParams<'_, f32>,
    heads: usize,
) -> Result<Tensor<f32>, TensorError> {
    params.d_model(heads)?;
    let q = linear(q_in, params.wq, Some(params.bq))?;
    let ctx = attend(&q, &memory.k, &memory.v, heads, Mask::None, 0)?;
    linear(&ctx, params.wo, Some(params.bo))
}

/// Same-padded convolution with a dense or INT8 kernel `[K × C_in × C_out]`.
pub struct Conv<'a> {
    w: &'a Param,
    b: &'a Tensor<f32>,
}

impl<'a> Conv<'a> {
    pub fn resolve(
        store: &'a ParamStore,
        prefix: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self, ParamError> {
        let w_slot = format!("{prefix}.w");
        let w = store.shaped(&w_slot, &[k, c_in, c_out])?;
        if matches!(w, Param::Sparse(_)) {
            return Err(ParamError::Kind { slot: w_slot, expected: "dense or int8", found: w.kind() });
        }
        store.shaped(&format!("{prefix}.b"), &[c_out])?;
        Ok(Conv { w, b: store.dense(&format!("{prefix}.b"))? })
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        match self.w {
            Param::Dense(w) => conv1d(x, w, self.b),
            Param::Quantized(q) => qconv1d(x, q, self.b),
            Param::Sparse(_) => unreachable!("rejected in resolve"),
        }
    }
}
