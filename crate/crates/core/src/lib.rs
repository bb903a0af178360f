//! Compact neural text-to-speech inference.
//!
//! Three models run in sequence: a transformer grapheme-to-phoneme
//! [`frontend`] with cross-layer weight sharing and cached decoding, a
//! non-autoregressive [`acoustic`] model with INT8 weights, and a subscale
//! WaveRNN [`vocoder`] with block-sparse recurrent and output layers. The
//! [`modelfile`] container stores shared tensors once and is the source of
//! every footprint number the tools report.

pub mod acoustic;
pub mod dtype;
pub mod frontend;
pub mod layers;
pub mod modelfile;
pub mod params;
pub mod pipeline;
pub mod quant;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod vocoder;

pub use dtype::Dtype;
pub use scalar::Scalar;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type BlockSparseF32 = sparse::BlockSparseMatrix<f32>;
pub type BlockSparseF64 = sparse::BlockSparseMatrix<f64>;
