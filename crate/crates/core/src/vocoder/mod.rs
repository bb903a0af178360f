//! Subscale WaveRNN vocoder: one GRU update per pair of output samples,
//! block-sparse recurrent and post-net matrices, 8-bit µ-law outputs.

mod model;
mod mulaw;
mod wav;

pub use model::{sample_categorical, CountingRng, StepTrace, Vocoder, VocoderState, Waveform};
pub use mulaw::{class_to_pcm, mu_law_decode, mu_law_encode, CENTER, MU, N_CLASSES};
pub use wav::{pcm_bytes, read_wav, wav_header, write_wav, WAV_HEADER_BYTES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtype::Dtype;
use crate::params::{
    build_store, count_specs, Init, Param, ParamCount, ParamError, ParamStore, PhysicalParam, SlotSpec, SparsityMeta,
};
use crate::sparse::{prune, to_block_sparse, BlockShape, PruneSchedule, SparseError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("vocoder config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite hidden state at iteration {iteration}")]
    Numeric { iteration: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderPreset {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub preset: VocoderPreset,
    /// GRU hidden width.
    pub h: usize,
    /// Post-net inner width.
    pub d: usize,
    pub n_mels: usize,
    pub cond_dim: usize,
    /// Width of the learned embedding of a previous sample class.
    pub embed_dim: usize,
    pub n_classes: usize,
    pub sample_rate: u32,
    pub frame_hop: usize,
    pub subscale_factor: usize,
    /// Target block sparsity of the recurrent matrix.
    pub gru_hh_sparsity: f64,
    /// Target block sparsity of the four post-net matrices.
    pub postnet_sparsity: f64,
    pub block: BlockShape,
    /// Samples per chunk delivered by streaming generation.
    pub chunk_samples: usize,
}

impl VocoderConfig {
    pub fn dense() -> Self {
        VocoderConfig {
            preset: VocoderPreset::Dense,
            h: 1024,
            d: 512,
            n_mels: 80,
            cond_dim: 128,
            embed_dim: 64,
            n_classes: N_CLASSES,
            sample_rate: 24_000,
            frame_hop: 256,
            subscale_factor: 2,
            gru_hh_sparsity: 0.85,
            postnet_sparsity: 0.85,
            block: BlockShape::default(),
            chunk_samples: 2048,
        }
    }

    pub fn sparse() -> Self {
        VocoderConfig { preset: VocoderPreset::Sparse, ..Self::dense() }
    }

    pub fn toy() -> Self {
        VocoderConfig {
            preset: VocoderPreset::Sparse,
            h: 32,
            d: 16,
            n_mels: 5,
            cond_dim: 8,
            embed_dim: 4,
            frame_hop: 8,
            gru_hh_sparsity: 0.5,
            postnet_sparsity: 0.5,
            chunk_samples: 6,
            ..Self::dense()
        }
    }

    pub fn gru_input(&self) -> usize {
        self.cond_dim + 2 * self.embed_dim
    }

    pub fn iterations_per_frame(&self) -> usize {
        self.frame_hop / self.subscale_factor
    }

    pub fn validate(&self) -> Result<(), VocoderError> {
        let fail = |m: String| Err(VocoderError::Config(m));
        if self.n_classes != N_CLASSES {
            return fail(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.subscale_factor != 2 {
            return fail(format!("subscale factor is fixed at 2, got {}", self.subscale_factor));
        }
        if self.frame_hop == 0 || !self.frame_hop.is_multiple_of(self.subscale_factor) {
            return fail(format!("frame_hop {} must be a positive multiple of 2", self.frame_hop));
        }
        if [self.h, self.d, self.n_mels, self.cond_dim, self.embed_dim, self.chunk_samples].contains(&0) {
            return fail("dimensions and chunk size must be positive".into());
        }
        for (name, s) in [("gru_hh", self.gru_hh_sparsity), ("postnet", self.postnet_sparsity)] {
            if !(0.0..1.0).contains(&s) {
                return fail(format!("{name} sparsity {s} outside [0, 1)"));
            }
        }
        let b = self.block;
        for (r, c) in [(3 * self.h, self.h), (self.d, self.h), (self.n_classes, self.d)] {
            if b.rows == 0 || b.cols == 0 || r % b.rows != 0 || c % b.cols != 0 {
                return fail(format!("[{r} x {c}] not divisible into {}x{} blocks", b.rows, b.cols));
            }
        }
        Ok(())
    }
}

/// Matrices eligible for pruning, all stored `[out × in]`.
pub const PRUNABLE: [&str; 5] = ["gru.w_hh", "a.fc1.w", "a.fc2.w", "b.fc1.w", "b.fc2.w"];

pub fn vocoder_slots(cfg: &VocoderConfig) -> Vec<SlotSpec> {
    let (h, d, e) = (cfg.h, cfg.d, cfg.embed_dim);
    let gi = cfg.gru_input();
    let mut s = vec![
        SlotSpec::new("cond.w", vec![cfg.n_mels, cfg.cond_dim], Init::fan_in(cfg.n_mels)),
        SlotSpec::new("cond.b", vec![cfg.cond_dim], Init::fan_in(cfg.n_mels)),
        SlotSpec::new("emb.sample", vec![cfg.n_classes, e], Init::Uniform(1.0)),
        SlotSpec::new("gru.w_ih", vec![gi, 3 * h], Init::fan_in(gi)),
        SlotSpec::new("gru.w_hh", vec![3 * h, h], Init::fan_in(h)),
        SlotSpec::new("gru.b", vec![3 * h], Init::fan_in(h)),
        SlotSpec::new("b.cond.w", vec![e, h], Init::fan_in(e)),
        SlotSpec::new("b.cond.b", vec![h], Init::fan_in(e)),
    ];
    for branch in ["a", "b"] {
        s.push(SlotSpec::new(format!("{branch}.fc1.w"), vec![d, h], Init::fan_in(h)));
        s.push(SlotSpec::new(format!("{branch}.fc1.b"), vec![d], Init::fan_in(h)));
        s.push(SlotSpec::new(format!("{branch}.fc2.w"), vec![cfg.n_classes, d], Init::fan_in(d)));
        s.push(SlotSpec::new(format!("{branch}.fc2.b"), vec![cfg.n_classes], Init::fan_in(d)));
    }
    for spec in &mut s {
        spec.storage = Dtype::F16;
        spec.prunable = PRUNABLE.contains(&spec.name.as_str());
    }
    s
}

pub fn vocoder_param_count(cfg: &VocoderConfig) -> ParamCount {
    count_specs(&vocoder_slots(cfg), str::to_string)
}

/// Seeded random vocoder weights. The sparse preset is pruned to its
/// configured targets in one step.
pub fn build_vocoder(cfg: &VocoderConfig, seed: u64) -> Result<ParamStore, VocoderError> {
    cfg.validate()?;
    let mut store = build_store(&vocoder_slots(cfg), str::to_string, seed)?;
    if cfg.preset == VocoderPreset::Sparse {
        prune_vocoder(&mut store, cfg, 1)?;
    }
    Ok(store)
}

fn target_for(cfg: &VocoderConfig, slot: &str) -> f64 {
    if slot == "gru.w_hh" {
        cfg.gru_hh_sparsity
    } else {
        cfg.postnet_sparsity
    }
}

/// Achieved sparsity after each step of a progressive pruning run.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneTrace {
    /// Fraction of all prunable blocks removed, one entry per step.
    pub steps: Vec<f64>,
    /// `(slot, achieved sparsity)` of each matrix after the last step.
    pub matrices: Vec<(String, f64)>,
}

/// Prunes every prunable matrix over `steps` steps of a cubic schedule
/// ending at its target, then stores the survivors block-sparse.
///
/// Blocks dropped at one step hold zeros and score lowest afterwards, so
/// the kept set only shrinks.
pub fn prune_vocoder(store: &mut ParamStore, cfg: &VocoderConfig, steps: u64) -> Result<PruneTrace, VocoderError> {
    if steps == 0 {
        return Err(VocoderError::Argument("prune needs at least one step".into()));
    }
    let mut work = Vec::new();
    for slot in PRUNABLE {
        let id = store.physical_id(slot)?;
        let entry = store.physical(id);
        if !entry.prunable {
            return Err(VocoderError::Argument(format!("`{slot}` is not marked prunable")));
        }
        let dense = match &entry.param {
            Param::Dense(t) => t.clone(),
            Param::Sparse(m) => m.densify(),
            Param::Quantized(_) => return Err(VocoderError::Argument(format!("`{slot}` is INT8; cannot prune"))),
        };
        let schedule = PruneSchedule::new(0, steps, target_for(cfg, slot))?;
        work.push((slot, id, dense, schedule, entry.storage));
    }
    let mut trace = PruneTrace { steps: Vec::new(), matrices: Vec::new() };
    let mut masks = vec![None; work.len()];
    for t in 1..=steps {
        let (mut dropped, mut total) = (0usize, 0usize);
        for (i, (_, _, w, schedule, _)) in work.iter_mut().enumerate() {
            let (mask, masked) = prune(w, schedule.sparsity_at(t), cfg.block)?;
            dropped += mask.n_blocks() - mask.kept();
            total += mask.n_blocks();
            *w = masked;
            masks[i] = Some(mask);
        }
        trace.steps.push(dropped as f64 / total as f64);
    }
    for ((slot, id, w, schedule, storage), mask) in work.into_iter().zip(masks) {
        let mask = mask.expect("at least one step ran");
        let sparse = to_block_sparse(&w, &mask)?;
        let achieved = sparse.sparsity();
        let mut entry = PhysicalParam::new(Param::Sparse(sparse), storage).prunable(true);
        entry.sparsity = Some(SparsityMeta { target: schedule.s_final, achieved, schedule: Some(schedule) });
        store.replace(id, entry)?;
        trace.matrices.push((slot.to_string(), achieved));
    }
    Ok(trace)
}

/// One row of a vocoder size breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintRow {
    pub slot: String,
    pub kind: &'static str,
    pub dtype: Dtype,
    pub bytes: usize,
    /// Size of the same tensor stored dense at FP16.
    pub dense_f16_bytes: usize,
}

/// Per-matrix serialized sizes; the rows sum to the store's physical bytes.
pub fn vocoder_footprint(store: &ParamStore) -> Vec<FootprintRow> {
    (0..store.physical_params().len())
        .map(|id| {
            let p = store.physical(id);
            FootprintRow {
                slot: store.primary_slot(id).unwrap_or("?").to_string(),
                kind: p.param.kind(),
                dtype: p.storage,
                bytes: p.blob_bytes(),
                dense_f16_bytes: p.dense_bytes_at(Dtype::F16),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn release_sizes_and_ratio() {
        let dense = build_vocoder(&VocoderConfig::dense(), 1).unwrap();
        let sparse = build_vocoder(&VocoderConfig::sparse(), 1).unwrap();
        let (db, sb) = (dense.physical_bytes(), sparse.physical_bytes());
        let ratio = sb as f64 / db as f64;
        println!("vocoder dense {db} sparse {sb} ratio {ratio:.3}");
        assert!((0.25..=0.40).contains(&ratio));
        let rows = vocoder_footprint(&sparse);
        assert_eq!(rows.iter().map(|r| r.bytes).sum::<usize>(), sb);
    }

    #[test]
    fn zero_sparsity_costs_only_index_overhead() {
        let cfg = VocoderConfig { gru_hh_sparsity: 0.0, postnet_sparsity: 0.0, ..VocoderConfig::toy() };
        let dense = build_vocoder(&VocoderConfig { preset: VocoderPreset::Dense, ..cfg.clone() }, 2).unwrap();
        let sparse = build_vocoder(&cfg, 2).unwrap();
        let overhead: usize = PRUNABLE
            .iter()
            .map(|s| {
                let n = dense.get(s).unwrap().numel() / cfg.block.area();
                crate::sparse::SPARSE_HEADER_BYTES + n * crate::sparse::BLOCK_INDEX_BYTES
            })
            .sum();
        assert_eq!(sparse.physical_bytes(), dense.physical_bytes() + overhead);
    }

    #[test]
    fn progressive_trace_is_monotone_and_lands_on_target() {
        let cfg = VocoderConfig { preset: VocoderPreset::Dense, ..VocoderConfig::toy() };
        let mut store = build_vocoder(&cfg, 3).unwrap();
        let mut direct = store.clone();
        let trace = prune_vocoder(&mut store, &cfg, 8).unwrap();
        assert_eq!(trace.steps.len(), 8);
        assert!(trace.steps.windows(2).all(|w| w[0] <= w[1]));
        for (slot, achieved) in &trace.matrices {
            let n = store.get(slot).unwrap().numel() / cfg.block.area();
            let want = (target_for(&cfg, slot) * n as f64).floor() / n as f64;
            assert_eq!(*achieved, want, "{slot}");
        }
        prune_vocoder(&mut direct, &cfg, 1).unwrap();
        let one_step = build_vocoder(&VocoderConfig { preset: VocoderPreset::Sparse, ..cfg }, 3).unwrap();
        assert_eq!(direct, one_step);
    }

    #[test]
    fn config_checks() {
        assert!(VocoderConfig { subscale_factor: 4, ..VocoderConfig::toy() }.validate().is_err());
        assert!(VocoderConfig { frame_hop: 7, ..VocoderConfig::toy() }.validate().is_err());
        assert!(VocoderConfig { gru_hh_sparsity: 1.0, ..VocoderConfig::toy() }.validate().is_err());
    }
}
