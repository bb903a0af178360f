use serde::{Deserialize, Serialize};

use super::{FrontendConfig, FrontendError};
use crate::dtype::Dtype;
use crate::layers::{ATTENTION_BIASES, ATTENTION_WEIGHTS};
use crate::params::{build_store, count_specs, Init, ParamCount, ParamStore, SlotSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    /// Every slot owns its tensor.
    Baseline,
    /// Interleaved attention sharing and one encoder feed-forward block.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionGroup {
    A,
    B,
}

/// Maps logical frontend slots to physical tensor keys.
///
/// Under [`SharingMode::Shared`]:
/// - encoder layer `i` (0-based) uses attention group A when `i` is even
///   and B when odd;
/// - decoder self-attention uses A, decoder cross-attention uses B;
/// - all encoder feed-forward weights resolve to one tensor pair;
/// - biases, norms, embeddings, the output head and decoder feed-forward
///   blocks stay per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharingPlan {
    pub mode: SharingMode,
}

impl SharingPlan {
    pub fn new(mode: SharingMode) -> Self {
        SharingPlan { mode }
    }

    pub fn baseline() -> Self {
        Self::new(SharingMode::Baseline)
    }

    pub fn shared() -> Self {
        Self::new(SharingMode::Shared)
    }

    pub fn encoder_group(layer: usize) -> AttentionGroup {
        if layer.is_multiple_of(2) {
            AttentionGroup::A
        } else {
            AttentionGroup::B
        }
    }

    /// Human-readable statement of the interleave, recorded in the manifest.
    pub fn describe(&self) -> &'static str {
        match self.mode {
            SharingMode::Baseline => "none",
            SharingMode::Shared => {
                "encoder attention weights alternate A/B starting with A at layer 0; \
                 decoder self-attention = A, cross-attention = B; encoder FFN weights shared; \
                 biases and norms per layer"
            }
        }
    }

    pub fn physical_key(&self, slot: &str) -> String {
        if self.mode == SharingMode::Baseline {
            return slot.to_string();
        }
        let parts: Vec<&str> = slot.split('.').collect();
        match parts.as_slice() {
            ["enc", layer, "attn", w] if ATTENTION_WEIGHTS.contains(w) => {
                let group = match layer.parse::<usize>().map(Self::encoder_group) {
                    Ok(AttentionGroup::A) => "A",
                    Ok(AttentionGroup::B) => "B",
                    Err(_) => return slot.to_string(),
                };
                format!("shared.attn.{group}.{w}")
            }
            ["dec", _, "self", w] if ATTENTION_WEIGHTS.contains(w) => format!("shared.attn.A.{w}"),
            ["dec", _, "cross", w] if ATTENTION_WEIGHTS.contains(w) => format!("shared.attn.B.{w}"),
            ["enc", _, "ffn", w @ ("w1" | "w2")] => format!("shared.enc_ffn.{w}"),
            _ => slot.to_string(),
        }
    }
}

fn attention_slots(specs: &mut Vec<SlotSpec>, prefix: &str, d: usize) {
    for w in ATTENTION_WEIGHTS {
        specs.push(SlotSpec::new(format!("{prefix}.{w}"), vec![d, d], Init::fan_in(d)));
    }
    for b in ATTENTION_BIASES {
        specs.push(SlotSpec::new(format!("{prefix}.{b}"), vec![d], Init::fan_in(d)));
    }
}

fn norm_slots(specs: &mut Vec<SlotSpec>, prefix: &str, d: usize) {
    specs.push(SlotSpec::new(format!("{prefix}.gamma"), vec![d], Init::Const(1.0)));
    specs.push(SlotSpec::new(format!("{prefix}.beta"), vec![d], Init::Const(0.0)));
}

fn ffn_slots(specs: &mut Vec<SlotSpec>, prefix: &str, d: usize, inner: usize) {
    specs.push(SlotSpec::new(format!("{prefix}.w1"), vec![d, inner], Init::fan_in(d)));
    specs.push(SlotSpec::new(format!("{prefix}.b1"), vec![inner], Init::fan_in(d)));
    specs.push(SlotSpec::new(format!("{prefix}.w2"), vec![inner, d], Init::fan_in(inner)));
    specs.push(SlotSpec::new(format!("{prefix}.b2"), vec![d], Init::fan_in(inner)));
}

/// Every logical slot of the frontend, in definition order, stored at FP16.
pub fn frontend_slots(cfg: &FrontendConfig) -> Vec<SlotSpec> {
    let d = cfg.d_model;
    let mut s = Vec::new();
    s.push(SlotSpec::new("emb.grapheme", vec![cfg.grapheme_vocab, d], Init::Uniform(1.0)));
    s.push(SlotSpec::new("emb.phoneme", vec![cfg.phoneme_vocab, d], Init::Uniform(1.0)));
    for i in 0..cfg.n_enc {
        attention_slots(&mut s, &format!("enc.{i}.attn"), d);
        norm_slots(&mut s, &format!("enc.{i}.ln1"), d);
        ffn_slots(&mut s, &format!("enc.{i}.ffn"), d, cfg.d_ff_enc);
        norm_slots(&mut s, &format!("enc.{i}.ln2"), d);
    }
    for j in 0..cfg.n_dec {
        attention_slots(&mut s, &format!("dec.{j}.self"), d);
        norm_slots(&mut s, &format!("dec.{j}.ln1"), d);
        attention_slots(&mut s, &format!("dec.{j}.cross"), d);
        norm_slots(&mut s, &format!("dec.{j}.ln2"), d);
        ffn_slots(&mut s, &format!("dec.{j}.ffn"), d, cfg.d_ff);
        norm_slots(&mut s, &format!("dec.{j}.ln3"), d);
    }
    s.push(SlotSpec::new("head.w", vec![d, cfg.phoneme_vocab], Init::fan_in(d)));
    s.push(SlotSpec::new("head.b", vec![cfg.phoneme_vocab], Init::fan_in(d)));
    for spec in &mut s {
        spec.storage = Dtype::F16;
    }
    s
}

/// Seeded random frontend weights laid out according to `plan`.
pub fn build_registry(cfg: &FrontendConfig, plan: SharingPlan, seed: u64) -> Result<ParamStore, FrontendError> {
    cfg.validate()?;
    let specs = frontend_slots(cfg);
    build_store(&specs, |s| plan.physical_key(s), seed).map_err(|e| FrontendError::Config(e.to_string()))
}

/// Logical and physical parameter counts, from the slot layout alone.
pub fn unique_param_count(cfg: &FrontendConfig, plan: SharingPlan) -> ParamCount {
    count_specs(&frontend_slots(cfg), |s| plan.physical_key(s))
}
