//! Non-autoregressive acoustic model: phoneme encoder, duration, pitch and
//! energy predictors, length regulator and mel decoder.

mod mel;
mod model;

pub use mel::{read_mel, write_mel, MelSpectrogram, MEL_MAGIC};
pub use model::{bucket, duration_from_log, length_regulate, Acoustic, VarianceFrame};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtype::Dtype;
use crate::frontend::Inventory;
use crate::layers::{ATTENTION_BIASES, ATTENTION_WEIGHTS};
use crate::params::{build_store, count_specs, Init, ParamCount, ParamError, ParamStore, SlotSpec};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum AcousticError {
    #[error("acoustic config error: {0}")]
    Config(String),
    #[error("empty phoneme sequence")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("mel dump: {0}")]
    Format(String),
    #[error("mel dump I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcousticPreset {
    Baseline,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub preset: AcousticPreset,
    pub phoneme_vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    /// Inner channels of the convolutional half of each block.
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// Channels and kernel of the duration, pitch and energy predictors.
    pub var_channels: usize,
    pub var_kernel: usize,
    pub n_mels: usize,
    pub n_var_bins: usize,
    pub pitch_range: (f32, f32),
    pub energy_range: (f32, f32),
    /// Output bias of the duration predictor, in log(1 + frames).
    pub duration_bias: f32,
    /// Audio samples per mel frame.
    pub frame_hop: usize,
}

impl AcousticConfig {
    pub fn baseline() -> Self {
        AcousticConfig {
            preset: AcousticPreset::Baseline,
            phoneme_vocab: Inventory::default_phonemes().len(),
            d_model: 256,
            heads: 2,
            n_enc_blocks: 3,
            n_dec_blocks: 3,
            conv_channels: 1024,
            conv_kernel: 9,
            var_channels: 256,
            var_kernel: 3,
            n_mels: 80,
            n_var_bins: 256,
            pitch_range: (-2.0, 2.0),
            energy_range: (-2.0, 2.0),
            duration_bias: std::f32::consts::LN_2,
            frame_hop: 256,
        }
    }

    /// Fewer blocks and fewer, narrower filters.
    pub fn reduced() -> Self {
        AcousticConfig {
            preset: AcousticPreset::Reduced,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            conv_channels: 256,
            conv_kernel: 3,
            var_channels: 128,
            ..Self::baseline()
        }
    }

    pub fn toy() -> Self {
        AcousticConfig {
            preset: AcousticPreset::Reduced,
            phoneme_vocab: 12,
            d_model: 8,
            heads: 2,
            n_enc_blocks: 2,
            n_dec_blocks: 1,
            conv_channels: 12,
            conv_kernel: 3,
            var_channels: 6,
            var_kernel: 3,
            n_mels: 5,
            n_var_bins: 16,
            pitch_range: (-2.0, 2.0),
            energy_range: (-2.0, 2.0),
            duration_bias: std::f32::consts::LN_2,
            frame_hop: 8,
        }
    }

    pub fn validate(&self) -> Result<(), AcousticError> {
        let fail = |m: String| Err(AcousticError::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.conv_kernel.is_multiple_of(2) || self.var_kernel.is_multiple_of(2) {
            return fail("convolution kernels must be odd".into());
        }
        if self.n_mels == 0 || self.n_var_bins == 0 || self.conv_channels == 0 || self.var_channels == 0 {
            return fail("n_mels, n_var_bins and channel counts must be positive".into());
        }
        if self.n_enc_blocks == 0 || self.n_dec_blocks == 0 {
            return fail("need at least one block per stack".into());
        }
        for (name, (lo, hi)) in [("pitch", self.pitch_range), ("energy", self.energy_range)] {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return fail(format!("{name} range ({lo}, {hi}) must be finite and increasing"));
            }
        }
        if self.frame_hop == 0 {
            return fail("frame_hop must be positive".into());
        }
        Ok(())
    }
}

pub const VARIANCE_HEADS: [&str; 3] = ["duration", "pitch", "energy"];

fn block_slots(s: &mut Vec<SlotSpec>, cfg: &AcousticConfig, prefix: &str) {
    let d = cfg.d_model;
    for w in ATTENTION_WEIGHTS {
        s.push(weight(format!("{prefix}.attn.{w}"), vec![d, d], d));
    }
    for b in ATTENTION_BIASES {
        s.push(SlotSpec::new(format!("{prefix}.attn.{b}"), vec![d], Init::fan_in(d)));
    }
    norm(s, &format!("{prefix}.ln1"), d);
    let (k, c) = (cfg.conv_kernel, cfg.conv_channels);
    s.push(weight(format!("{prefix}.conv1.w"), vec![k, d, c], k * d));
    s.push(SlotSpec::new(format!("{prefix}.conv1.b"), vec![c], Init::fan_in(k * d)));
    s.push(weight(format!("{prefix}.conv2.w"), vec![1, c, d], c));
    s.push(SlotSpec::new(format!("{prefix}.conv2.b"), vec![d], Init::fan_in(c)));
    norm(s, &format!("{prefix}.ln2"), d);
}

fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> SlotSpec {
    let mut spec = SlotSpec::new(name, shape, Init::fan_in(fan_in));
    spec.quantizable = true;
    spec
}

fn norm(s: &mut Vec<SlotSpec>, prefix: &str, d: usize) {
    s.push(SlotSpec::new(format!("{prefix}.gamma"), vec![d], Init::Const(1.0)));
    s.push(SlotSpec::new(format!("{prefix}.beta"), vec![d], Init::Const(0.0)));
}

/// Every acoustic slot, stored at FP16. Matrices and kernels are marked
/// quantizable; biases, norms and embeddings are not.
pub fn acoustic_slots(cfg: &AcousticConfig) -> Vec<SlotSpec> {
    let d = cfg.d_model;
    let mut s = vec![SlotSpec::new("emb.phoneme", vec![cfg.phoneme_vocab, d], Init::Uniform(1.0))];
    for i in 0..cfg.n_enc_blocks {
        block_slots(&mut s, cfg, &format!("enc.{i}"));
    }
    let (kv, cv) = (cfg.var_kernel, cfg.var_channels);
    for head in VARIANCE_HEADS {
        let p = format!("var.{head}");
        s.push(weight(format!("{p}.conv1.w"), vec![kv, d, cv], kv * d));
        s.push(SlotSpec::new(format!("{p}.conv1.b"), vec![cv], Init::fan_in(kv * d)));
        norm(&mut s, &format!("{p}.ln1"), cv);
        s.push(weight(format!("{p}.conv2.w"), vec![kv, cv, cv], kv * cv));
        s.push(SlotSpec::new(format!("{p}.conv2.b"), vec![cv], Init::fan_in(kv * cv)));
        norm(&mut s, &format!("{p}.ln2"), cv);
        // a zero duration projection makes the untrained head predict the
        // prior (duration_bias) for every phoneme
        let mut out = weight(format!("{p}.out.w"), vec![cv, 1], cv);
        if head == "duration" {
            out.init = Init::Const(0.0);
        }
        s.push(out);
        let bias = if head == "duration" { Init::Const(cfg.duration_bias) } else { Init::Const(0.0) };
        s.push(SlotSpec::new(format!("{p}.out.b"), vec![1], bias));
    }
    s.push(SlotSpec::new("emb.pitch", vec![cfg.n_var_bins, d], Init::Uniform(1.0)));
    s.push(SlotSpec::new("emb.energy", vec![cfg.n_var_bins, d], Init::Uniform(1.0)));
    for i in 0..cfg.n_dec_blocks {
        block_slots(&mut s, cfg, &format!("dec.{i}"));
    }
    s.push(weight("mel.w".into(), vec![d, cfg.n_mels], d));
    s.push(SlotSpec::new("mel.b", vec![cfg.n_mels], Init::fan_in(d)));
    for spec in &mut s {
        spec.storage = Dtype::F16;
    }
    s
}

/// Seeded random acoustic weights at FP16; quantize separately.
pub fn build_acoustic(cfg: &AcousticConfig, seed: u64) -> Result<ParamStore, AcousticError> {
    cfg.validate()?;
    Ok(build_store(&acoustic_slots(cfg), str::to_string, seed)?)
}

pub fn acoustic_param_count(cfg: &AcousticConfig) -> ParamCount {
    count_specs(&acoustic_slots(cfg), str::to_string)
}
