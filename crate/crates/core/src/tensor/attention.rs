use super::ops::{linear, softmax_in_place, Projection};
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
}

/// Borrowed view of one attention sublayer's parameters.
///
/// The weight matrices are the unit that parameter sharing aliases; the
/// biases are always owned by the individual layer.
#[derive(Clone, Copy)]
pub struct AttentionParams<'a, T: Scalar> {
    pub wq: &'a dyn Projection<T>,
    pub wk: &'a dyn Projection<T>,
    pub wv: &'a dyn Projection<T>,
    pub wo: &'a dyn Projection<T>,
    pub bq: &'a Tensor<T>,
    pub bk: &'a Tensor<T>,
    pub bv: &'a Tensor<T>,
    pub bo: &'a Tensor<T>,
}

impl<T: Scalar> AttentionParams<'_, T> {
    /// Checks square projections of a common width divisible by `heads`.
    pub fn d_model(&self, heads: usize) -> Result<usize, TensorError> {
        let d = self.wq.in_dim();
        let projections = [self.wq, self.wk, self.wv, self.wo];
        if projections.iter().any(|w| w.in_dim() != d || w.out_dim() != d) {
            return Err(TensorError::shape("attention", "projections must all be d_model x d_model"));
        }
        if [self.bq, self.bk, self.bv, self.bo].iter().any(|b| b.len() != d) {
            return Err(TensorError::shape("attention", "biases must have d_model entries"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::config("attention", format!("d_model {d} is not divisible by {heads} heads")));
        }
        Ok(d)
    }
}

/// Projected keys and values accumulated over decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> LayerKv<T> {
    pub fn empty(d_model: usize) -> Self {
        LayerKv { k: Tensor::zeros(vec![0, d_model]), v: Tensor::zeros(vec![0, d_model]) }
    }

    /// Projects `kv_in` once, e.g. encoder memory for cross-attention.
    pub fn from_input(kv_in: &Tensor<T>, params: &AttentionParams<'_, T>) -> Result<Self, TensorError> {
        Ok(LayerKv { k: linear(kv_in, params.wk, Some(params.bk))?, v: linear(kv_in, params.wv, Some(params.bv))? })
    }

    pub fn len(&self) -> usize {
        self.k.outer()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`.
///
/// With a causal mask, query row `i` sits at absolute position
/// `q_offset + i` and sees keys `0..=q_offset + i`.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Mask,
    q_offset: usize,
) -> Result<Tensor<T>, TensorError> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.outer() != v.outer() {
        return Err(TensorError::shape("attend", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::config("attend", format!("d_model {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let (nq, nk) = (q.outer(), k.outer());
    let mut out = Tensor::zeros(vec![nq, d]);
    let mut scores = Vec::with_capacity(nk);
    for i in 0..nq {
        let visible = match mask {
            Mask::None => nk,
            Mask::Causal => (q_offset + i + 1).min(nk),
        };
        if visible == 0 {
            continue;
        }
        let qrow = q.row(i);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &qrow[cols.clone()];
            scores.clear();
            for j in 0..visible {
                let kh = &k.row(j)[cols.clone()];
                let mut dot = T::zero();
                for (&a, &b) in qh.iter().zip(kh) {
                    dot += a * b;
                }
                scores.push(dot * scale);
            }
            softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(i)[cols.clone()];
            for (j, &p) in scores.iter().enumerate() {
                let vh = &v.row(j)[cols.clone()];
                for (o, &vv) in orow.iter_mut().zip(vh) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok(out)
}

/// Multi-head attention with optional incremental key/value cache.
///
/// Without a cache, keys and values are projected from `kv_in` in full.
/// With a cache, the projections of `kv_in` (the new step(s)) are appended
/// first and queries attend over everything cached, positioned after the
/// previously cached steps.
pub fn multi_head_attention<T: Scalar>(
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    params: &AttentionParams<'_, T>,
    heads: usize,
    mask: Mask,
    cache: Option<&mut LayerKv<T>>,
) -> Result<Tensor<T>, TensorError> {
    params.d_model(heads)?;
    let q = linear(q_in, params.wq, Some(params.bq))?;
    let ctx = match cache {
        Some(cache) => {
            let offset = cache.len();
            let fresh = LayerKv::from_input(kv_in, params)?;
            cache.k.extend_rows(&fresh.k)?;
            cache.v.extend_rows(&fresh.v)?;
            attend(&q, &cache.k, &cache.v, heads, mask, offset)?
        }
        None => {
            let kv = LayerKv::from_input(kv_in, params)?;
            attend(&q, &kv.k, &kv.v, heads, mask, 0)?
        }
    };
    linear(&ctx, params.wo, Some(params.bo))
}
