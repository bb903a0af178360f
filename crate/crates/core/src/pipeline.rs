//! The three models bundled as one voice, and end-to-end synthesis.

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{build_acoustic, Acoustic, AcousticConfig, AcousticError, MelSpectrogram, VarianceFrame};
use crate::frontend::{build_registry, Frontend, FrontendConfig, FrontendError, Inventory, PhonemeSeq, EOS};
use crate::params::{Param, ParamStore};
use crate::quant::CalibMethod;
use crate::vocoder::{build_vocoder, Vocoder, VocoderConfig, VocoderError, Waveform};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frontend: {0}")]
    Frontend(#[from] FrontendError),
    #[error("acoustic: {0}")]
    Acoustic(#[from] AcousticError),
    #[error("vocoder: {0}")]
    Vocoder(#[from] VocoderError),
    #[error("model: {0}")]
    Model(String),
}

impl PipelineError {
    /// Name of the stage that failed.
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Frontend(_) => "frontend",
            PipelineError::Acoustic(_) => "acoustic",
            PipelineError::Vocoder(_) => "vocoder",
            PipelineError::Model(_) => "model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 16-5 unshared frontend, FP16 acoustic model, dense vocoder.
    Baseline,
    /// 20-1 shared frontend, reduced INT8 acoustic model, sparse vocoder.
    Optimized,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Preset::Baseline),
            "optimized" => Ok(Preset::Optimized),
            other => Err(format!("unknown preset `{other}` (expected baseline or optimized)")),
        }
    }
}

/// Config and weights of one model stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<C> {
    pub config: C,
    pub store: ParamStore,
}

/// All weights of one voice.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsModel {
    pub frontend: Stage<FrontendConfig>,
    pub acoustic: Stage<AcousticConfig>,
    pub vocoder: Stage<VocoderConfig>,
}

pub const COMPONENTS: [&str; 3] = ["frontend", "acoustic", "vocoder"];

impl TtsModel {
    pub fn configs_for(preset: Preset) -> (FrontendConfig, AcousticConfig, VocoderConfig) {
        match preset {
            Preset::Baseline => (FrontendConfig::baseline(), AcousticConfig::baseline(), VocoderConfig::dense()),
            Preset::Optimized => (FrontendConfig::optimized(), AcousticConfig::reduced(), VocoderConfig::sparse()),
        }
    }

    /// Seeded random weights. The optimized preset's acoustic weights are
    /// quantized with max-abs calibration.
    pub fn init_random(preset: Preset, seed: u64) -> Result<Self, PipelineError> {
        let (fe, ac, voc) = Self::configs_for(preset);
        Self::from_configs(fe, ac, voc, preset == Preset::Optimized, seed)
    }

    pub fn from_configs(
        fe: FrontendConfig,
        ac: AcousticConfig,
        voc: VocoderConfig,
        quantize_acoustic: bool,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let mut fe_store = build_registry(&fe, fe.plan(), seed)?;
        suppress_untrained_eos(&mut fe_store)?;
        let mut ac_store = build_acoustic(&ac, seed.wrapping_add(1))?;
        if quantize_acoustic {
            ac_store.quantize(CalibMethod::MaxAbs).map_err(AcousticError::from)?;
        }
        let voc_store = build_vocoder(&voc, seed.wrapping_add(2))?;
        Ok(TtsModel {
            frontend: Stage { config: fe, store: fe_store },
            acoustic: Stage { config: ac, store: ac_store },
            vocoder: Stage { config: voc, store: voc_store },
        })
    }

    /// Small model for tests; all stages are toy sized.
    pub fn toy(seed: u64) -> Result<Self, PipelineError> {
        let fe = FrontendConfig {
            grapheme_vocab: Inventory::default_graphemes().len(),
            phoneme_vocab: Inventory::default_phonemes().len(),
            ..FrontendConfig::toy()
        };
        let ac = AcousticConfig { phoneme_vocab: fe.phoneme_vocab, ..AcousticConfig::toy() };
        let voc = VocoderConfig { n_mels: ac.n_mels, frame_hop: ac.frame_hop, ..VocoderConfig::toy() };
        Self::from_configs(fe, ac, voc, true, seed)
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [("frontend", &self.frontend.store), ("acoustic", &self.acoustic.store), ("vocoder", &self.vocoder.store)]
    }

    /// Checks that the stage configs agree with each other and with the
    /// inventories, and that every stage binds to its weights.
    pub fn validate(&self, graphemes: &Inventory, phonemes: &Inventory) -> Result<(), PipelineError> {
        let (fe, ac, voc) = (&self.frontend.config, &self.acoustic.config, &self.vocoder.config);
        let mismatch = |what: String| Err(PipelineError::Model(what));
        if fe.grapheme_vocab != graphemes.len() {
            return mismatch(format!(
                "grapheme inventory has {} entries, frontend expects {}",
                graphemes.len(),
                fe.grapheme_vocab
            ));
        }
        if fe.phoneme_vocab != phonemes.len() || ac.phoneme_vocab != phonemes.len() {
            return mismatch(format!(
                "phoneme inventory has {} entries, models expect {}/{}",
                phonemes.len(),
                fe.phoneme_vocab,
                ac.phoneme_vocab
            ));
        }
        if ac.n_mels != voc.n_mels || ac.frame_hop != voc.frame_hop {
            return mismatch("acoustic and vocoder disagree on mel bins or hop".into());
        }
        self.synthesizer()?;
        Ok(())
    }

    pub fn synthesizer(&self) -> Result<Synthesizer<'_>, PipelineError> {
        Ok(Synthesizer {
            frontend: Frontend::new(&self.frontend.store, &self.frontend.config)?,
            acoustic: Acoustic::new(&self.acoustic.store, &self.acoustic.config)?,
            vocoder: Vocoder::new(&self.vocoder.store, &self.vocoder.config)?,
        })
    }
}

/// Output bias given to EOS in untrained frontends.
pub const UNTRAINED_EOS_BIAS: f32 = -1000.0;

/// Random weights stop greedy decoding at an arbitrary step, so output
/// length would follow the seed rather than the input. With EOS suppressed
/// every untrained frontend decodes to its length cap, which gives presets
/// built from different seeds or configs the same amount of work.
fn suppress_untrained_eos(store: &mut ParamStore) -> Result<(), PipelineError> {
    let id = store.physical_id("head.b").map_err(FrontendError::from)?;
    let mut entry = store.physical(id).clone();
    if let Param::Dense(b) = &mut entry.param {
        b.data_mut()[EOS as usize] = UNTRAINED_EOS_BIAS;
    }
    store.replace(id, entry).map_err(FrontendError::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub frontend: Duration,
    pub acoustic: Duration,
    pub vocoder: Duration,
}

impl StageTimes {
    pub fn sum(&self) -> Duration {
        self.frontend + self.acoustic + self.vocoder
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub phonemes: PhonemeSeq,
    pub variances: Vec<VarianceFrame>,
    pub mel: MelSpectrogram,
    pub waveform: Waveform,
    pub times: StageTimes,
    /// Wall time of the whole call.
    pub total: Duration,
}

/// Bound views of the three stages.
pub struct Synthesizer<'a> {
    pub frontend: Frontend<'a>,
    pub acoustic: Acoustic<'a>,
    pub vocoder: Vocoder<'a>,
}

impl Synthesizer<'_> {
    /// Text to mel: returns phonemes, variances and the mel with stage times.
    pub fn text_to_mel(
        &self,
        graphemes: &Inventory,
        text: &str,
    ) -> Result<(PhonemeSeq, Vec<VarianceFrame>, MelSpectrogram, StageTimes), PipelineError> {
        let mut times = StageTimes::default();
        let t0 = Instant::now();
        let phonemes = self.frontend.g2p(graphemes, text)?;
        times.frontend = t0.elapsed();
        let t1 = Instant::now();
        // the emitted sequence never contains PAD, BOS or UNK; a final EOS is
        // kept as the utterance-end token
        let (mel, variances) = self.acoustic.infer(&phonemes.ids)?;
        times.acoustic = t1.elapsed();
        Ok((phonemes, variances, mel, times))
    }

    /// Full pipeline; `sink` receives PCM chunks in order as they are made.
    pub fn synthesize_streaming(
        &self,
        graphemes: &Inventory,
        text: &str,
        seed: u64,
        on_mel: &mut dyn FnMut(&MelSpectrogram) -> std::io::Result<()>,
        sink: &mut dyn FnMut(&[i16]) -> std::io::Result<()>,
    ) -> Result<Synthesis, PipelineError> {
        let start = Instant::now();
        let (phonemes, variances, mel, mut times) = self.text_to_mel(graphemes, text)?;
        on_mel(&mel).map_err(|e| PipelineError::Model(format!("mel consumer failed: {e}")))?;
        let t2 = Instant::now();
        let mut samples = Vec::with_capacity(mel.n_samples());
        let (iterations, rng_draws) = self.vocoder.generate_streaming(&mel, seed, &mut |c| {
            samples.extend_from_slice(c);
            sink(c)
        })?;
        times.vocoder = t2.elapsed();
        let waveform = Waveform { samples, sample_rate: self.vocoder.config().sample_rate, iterations, rng_draws };
        Ok(Synthesis { phonemes, variances, mel, waveform, times, total: start.elapsed() })
    }

    pub fn synthesize(&self, graphemes: &Inventory, text: &str, seed: u64) -> Result<Synthesis, PipelineError> {
        self.synthesize_streaming(graphemes, text, seed, &mut |_| Ok(()), &mut |_| Ok(()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_pipeline_conserves_samples() {
        let model = TtsModel::toy(3).unwrap();
        let (g, p) = (Inventory::default_graphemes(), Inventory::default_phonemes());
        model.validate(&g, &p).unwrap();
        let synth = model.synthesizer().unwrap();
        let out = synth.synthesize(&g, "hello there", 5).unwrap();
        assert_eq!(out.waveform.samples.len(), out.mel.n_frames() * model.vocoder.config.frame_hop);
        let again = synth.synthesize(&g, "hello there", 5).unwrap();
        assert_eq!(out.waveform.samples, again.waveform.samples);
        assert!(matches!(synth.synthesize(&g, "", 5), Err(PipelineError::Frontend(FrontendError::EmptyInput))));
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("optimized".parse::<Preset>().unwrap(), Preset::Optimized);
        assert!("fast".parse::<Preset>().is_err());
    }
}
