use serde::{Deserialize, Serialize};

use super::tokenizer::{tokenize, Inventory, BOS, EOS, PAD, UNK};
use super::{FrontendConfig, FrontendError};
use crate::layers::{attend_memory, resolve_attention, resolve_linear, FeedForward, Norm};
use crate::params::ParamStore;
use crate::tensor::{
    add_in_place, embedding_lookup, linear, multi_head_attention, sinusoidal_positions, AttentionParams, LayerKv, Mask,
    Projection, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    /// Append each step's keys and values to a per-layer cache.
    Cached,
    /// Re-run the decoder over the whole prefix at every step.
    Recompute,
}

/// Emitted phoneme ids, without the leading BOS. Ends with EOS unless the
/// length cap was hit first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PhonemeSeq {
    pub ids: Vec<u32>,
}

impl PhonemeSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Ids with specials removed, the input the acoustic model consumes.
    pub fn content(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&id| id > UNK).collect()
    }

    pub fn symbols<'a>(&self, inv: &'a Inventory) -> Vec<&'a str> {
        self.content().into_iter().filter_map(|id| inv.token(id)).collect()
    }
}

/// Greedy choice over logits. PAD, BOS and UNK are never emitted; ties go
/// to the lowest id.
pub fn argmax_allowed(logits: &[f32]) -> u32 {
    let mut best = EOS as usize;
    for (i, &v) in logits.iter().enumerate() {
        if i as u32 == PAD || i as u32 == BOS || i as u32 == UNK {
            continue;
        }
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-session decoder state: self-attention keys/values that grow by one
/// row per step, and cross-attention memory fixed at encode time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    self_kv: Vec<LayerKv<f32>>,
    memory: Vec<LayerKv<f32>>,
}

impl KvCache {
    /// Number of decoded steps held.
    pub fn len(&self) -> usize {
        self.self_kv.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_initialized(&self) -> bool {
        !self.memory.is_empty()
    }

    pub fn layer_lens(&self) -> Vec<usize> {
        self.self_kv.iter().map(LayerKv::len).collect()
    }
}

struct EncoderLayer<'a> {
    attn: AttentionParams<'a, f32>,
    ln1: Norm<'a>,
    ffn: FeedForward<'a>,
    ln2: Norm<'a>,
}

struct DecoderLayer<'a> {
    self_attn: AttentionParams<'a, f32>,
    ln1: Norm<'a>,
    cross: AttentionParams<'a, f32>,
    ln2: Norm<'a>,
    ffn: FeedForward<'a>,
    ln3: Norm<'a>,
}

/// Frontend network bound to a parameter store.
pub struct Frontend<'a> {
    cfg: FrontendConfig,
    grapheme_emb: &'a Tensor<f32>,
    phoneme_emb: &'a Tensor<f32>,
    enc: Vec<EncoderLayer<'a>>,
    dec: Vec<DecoderLayer<'a>>,
    head_w: &'a dyn Projection<f32>,
    head_b: &'a Tensor<f32>,
}

impl<'a> Frontend<'a> {
    pub fn new(store: &'a ParamStore, cfg: &FrontendConfig) -> Result<Self, FrontendError> {
        cfg.validate()?;
        let d = cfg.d_model;
        store.shaped("emb.grapheme", &[cfg.grapheme_vocab, d])?;
        store.shaped("emb.phoneme", &[cfg.phoneme_vocab, d])?;
        let enc = (0..cfg.n_enc)
            .map(|i| {
                let p = format!("enc.{i}");
                Ok(EncoderLayer {
                    attn: resolve_attention(store, &format!("{p}.attn"), d)?,
                    ln1: Norm::resolve(store, &format!("{p}.ln1"), d)?,
                    ffn: FeedForward::resolve(store, &format!("{p}.ffn"), d, cfg.d_ff_enc)?,
                    ln2: Norm::resolve(store, &format!("{p}.ln2"), d)?,
                })
            })
            .collect::<Result<Vec<_>, FrontendError>>()?;
        let dec = (0..cfg.n_dec)
            .map(|j| {
                let p = format!("dec.{j}");
                Ok(DecoderLayer {
                    self_attn: resolve_attention(store, &format!("{p}.self"), d)?,
                    ln1: Norm::resolve(store, &format!("{p}.ln1"), d)?,
                    cross: resolve_attention(store, &format!("{p}.cross"), d)?,
                    ln2: Norm::resolve(store, &format!("{p}.ln2"), d)?,
                    ffn: FeedForward::resolve(store, &format!("{p}.ffn"), d, cfg.d_ff)?,
                    ln3: Norm::resolve(store, &format!("{p}.ln3"), d)?,
                })
            })
            .collect::<Result<Vec<_>, FrontendError>>()?;
        let (head_w, head_b) = resolve_linear(store, "head.w", "head.b", d, cfg.phoneme_vocab)?;
        Ok(Frontend {
            cfg: cfg.clone(),
            grapheme_emb: store.dense("emb.grapheme")?,
            phoneme_emb: store.dense("emb.phoneme")?,
            enc,
            dec,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    fn embed(&self, table: &Tensor<f32>, ids: &[u32], offset: usize) -> Result<Tensor<f32>, FrontendError> {
        let mut x = embedding_lookup(table, ids)?;
        add_in_place(&mut x, &sinusoidal_positions(ids.len(), self.cfg.d_model, offset))?;
        Ok(x)
    }

    /// Encoder memory `[n × d_model]`. A leading BOS is stripped, so the
    /// tokenization of an empty sentence encodes as the lone EOS.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor<f32>, FrontendError> {
        let tokens = tokens.strip_prefix(&[BOS]).unwrap_or(tokens);
        if tokens.is_empty() {
            return Err(FrontendError::EmptyInput);
        }
        if tokens.len() > self.cfg.max_len {
            return Err(FrontendError::InputTooLong { len: tokens.len(), max: self.cfg.max_len });
        }
        let heads = self.cfg.heads;
        let mut x = self.embed(self.grapheme_emb, tokens, 0)?;
        for layer in &self.enc {
            let a = multi_head_attention(&x, &x, &layer.attn, heads, Mask::None, None)?;
            x = layer.ln1.residual(x, &a)?;
            let f = layer.ffn.apply(&x)?;
            x = layer.ln2.residual(x, &f)?;
        }
        Ok(x)
    }

    /// Fresh cache whose cross-attention memory is projected from `memory`.
    pub fn start(&self, memory: &Tensor<f32>) -> Result<KvCache, FrontendError> {
        let d = self.cfg.d_model;
        let memory = self.dec.iter().map(|l| LayerKv::from_input(memory, &l.cross)).collect::<Result<Vec<_>, _>>()?;
        Ok(KvCache { self_kv: (0..self.dec.len()).map(|_| LayerKv::empty(d)).collect(), memory })
    }

    fn head(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, FrontendError> {
        let logits = linear(x, self.head_w, Some(self.head_b))?;
        if !logits.is_finite() {
            return Err(FrontendError::State("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// One cached decoder step fed `prev`; appends one row to every layer's
    /// self-attention cache and returns logits over the phoneme vocabulary.
    pub fn decode_step(&self, cache: &mut KvCache, prev: u32) -> Result<Vec<f32>, FrontendError> {
        if cache.memory.len() != self.dec.len() || cache.self_kv.len() != self.dec.len() {
            return Err(FrontendError::State("cache was not initialized from an encoder memory".into()));
        }
        let heads = self.cfg.heads;
        let mut x = self.embed(self.phoneme_emb, &[prev], cache.len())?;
        for (l, layer) in self.dec.iter().enumerate() {
            let a = multi_head_attention(&x, &x, &layer.self_attn, heads, Mask::Causal, Some(&mut cache.self_kv[l]))?;
            x = layer.ln1.residual(x, &a)?;
            let c = attend_memory(&x, &cache.memory[l], &layer.cross, heads)?;
            x = layer.ln2.residual(x, &c)?;
            let f = layer.ffn.apply(&x)?;
            x = layer.ln3.residual(x, &f)?;
        }
        Ok(self.head(&x)?.into_data())
    }

    /// Teacher-forced decoder over the whole `prefix` with no cache:
    /// logits `[prefix.len() × phoneme_vocab]`.
    pub fn decode_full(&self, memory: &Tensor<f32>, prefix: &[u32]) -> Result<Tensor<f32>, FrontendError> {
        let heads = self.cfg.heads;
        let mut x = self.embed(self.phoneme_emb, prefix, 0)?;
        for layer in &self.dec {
            let a = multi_head_attention(&x, &x, &layer.self_attn, heads, Mask::Causal, None)?;
            x = layer.ln1.residual(x, &a)?;
            let c = multi_head_attention(&x, memory, &layer.cross, heads, Mask::None, None)?;
            x = layer.ln2.residual(x, &c)?;
            let f = layer.ffn.apply(&x)?;
            x = layer.ln3.residual(x, &f)?;
        }
        self.head(&x)
    }

    /// Greedy decoding from an encoder memory with an explicit strategy.
    pub fn decode_greedy(&self, memory: &Tensor<f32>, strategy: DecodeStrategy) -> Result<PhonemeSeq, FrontendError> {
        let mut seq = PhonemeSeq::default();
        match strategy {
            DecodeStrategy::Cached => {
                let mut cache = self.start(memory)?;
                let mut prev = BOS;
                while seq.len() < self.cfg.max_len {
                    prev = argmax_allowed(&self.decode_step(&mut cache, prev)?);
                    seq.ids.push(prev);
                    if prev == EOS {
                        break;
                    }
                }
            }
            DecodeStrategy::Recompute => {
                let mut prefix = vec![BOS];
                while seq.len() < self.cfg.max_len {
                    let logits = self.decode_full(memory, &prefix)?;
                    let next = argmax_allowed(logits.row(prefix.len() - 1));
                    seq.ids.push(next);
                    prefix.push(next);
                    if next == EOS {
                        break;
                    }
                }
            }
        }
        Ok(seq)
    }

    /// Grapheme ids (as produced by `tokenize`) to phoneme ids, using the
    /// configured decode strategy.
    pub fn g2p_ids(&self, tokens: &[u32]) -> Result<PhonemeSeq, FrontendError> {
        let memory = self.encode(tokens)?;
        self.decode_greedy(&memory, self.cfg.decode)
    }

    pub fn g2p(&self, graphemes: &Inventory, text: &str) -> Result<PhonemeSeq, FrontendError> {
        if text.is_empty() {
            return Err(FrontendError::EmptyInput);
        }
        self.g2p_ids(&tokenize(graphemes, text))
    }
}
