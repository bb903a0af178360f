use super::{AcousticConfig, AcousticError, MelSpectrogram, VARIANCE_HEADS};
use crate::layers::{resolve_attention, resolve_linear, Conv, Norm};
use crate::params::ParamStore;
use crate::tensor::{
    add_in_place, embedding_lookup, linear, multi_head_attention, relu_in_place, sinusoidal_positions, AttentionParams,
    Mask, Projection, Tensor,
};

/// Per-phoneme prosody prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFrame {
    pub duration: u32,
    pub pitch: f32,
    pub energy: f32,
}

/// Frames for a predicted `log(1 + duration)`: `exp(x) − 1`, rounded half
/// away from zero, floored at 0.
pub fn duration_from_log(x: f32) -> u32 {
    let d = (x.exp() - 1.0).round();
    if d.is_nan() || d <= 0.0 {
        0
    } else {
        d.min(u32::MAX as f32) as u32
    }
}

/// Linear bucket of `value` clamped to `range`; the maximum maps to the last bin.
pub fn bucket(value: f32, range: (f32, f32), bins: usize) -> usize {
    let (lo, hi) = range;
    let v = if value.is_nan() { lo } else { value.clamp(lo, hi) };
    let frac = ((v - lo) / (hi - lo)) as f64;
    ((frac * bins as f64).floor() as usize).min(bins - 1)
}

/// Repeats row `i` of `hidden` `durations[i]` times.
pub fn length_regulate(hidden: &Tensor<f32>, durations: &[i64]) -> Result<Tensor<f32>, AcousticError> {
    if hidden.ndim() != 2 || hidden.outer() != durations.len() {
        return Err(AcousticError::Argument(format!("{} durations for hidden {:?}", durations.len(), hidden.shape())));
    }
    if let Some((i, d)) = durations.iter().enumerate().find(|(_, &d)| d < 0) {
        return Err(AcousticError::Argument(format!("negative duration {d} at phoneme {i}")));
    }
    let d = hidden.cols();
    let total: i64 = durations.iter().sum();
    let mut out = Vec::with_capacity(total as usize * d);
    for (i, &n) in durations.iter().enumerate() {
        for _ in 0..n {
            out.extend_from_slice(hidden.row(i));
        }
    }
    Ok(Tensor::new(vec![total as usize, d], out)?)
}

struct FftBlock<'a> {
    attn: AttentionParams<'a, f32>,
    ln1: Norm<'a>,
    conv1: Conv<'a>,
    conv2: Conv<'a>,
    ln2: Norm<'a>,
}

impl<'a> FftBlock<'a> {
    fn resolve(store: &'a ParamStore, cfg: &AcousticConfig, prefix: &str) -> Result<Self, AcousticError> {
        let d = cfg.d_model;
        Ok(FftBlock {
            attn: resolve_attention(store, &format!("{prefix}.attn"), d)?,
            ln1: Norm::resolve(store, &format!("{prefix}.ln1"), d)?,
            conv1: Conv::resolve(store, &format!("{prefix}.conv1"), cfg.conv_kernel, d, cfg.conv_channels)?,
            conv2: Conv::resolve(store, &format!("{prefix}.conv2"), 1, cfg.conv_channels, d)?,
            ln2: Norm::resolve(store, &format!("{prefix}.ln2"), d)?,
        })
    }

    fn apply(&self, x: Tensor<f32>, heads: usize) -> Result<Tensor<f32>, AcousticError> {
        let a = multi_head_attention(&x, &x, &self.attn, heads, Mask::None, None)?;
        let x = self.ln1.residual(x, &a)?;
        let mut h = self.conv1.apply(&x)?;
        relu_in_place(h.data_mut());
        let h = self.conv2.apply(&h)?;
        Ok(self.ln2.residual(x, &h)?)
    }
}

struct VariancePredictor<'a> {
    conv1: Conv<'a>,
    ln1: Norm<'a>,
    conv2: Conv<'a>,
    ln2: Norm<'a>,
    out_w: &'a dyn Projection<f32>,
    out_b: &'a Tensor<f32>,
}

impl<'a> VariancePredictor<'a> {
    fn resolve(store: &'a ParamStore, cfg: &AcousticConfig, prefix: &str) -> Result<Self, AcousticError> {
        let (k, c) = (cfg.var_kernel, cfg.var_channels);
        let (out_w, out_b) = resolve_linear(store, &format!("{prefix}.out.w"), &format!("{prefix}.out.b"), c, 1)?;
        Ok(VariancePredictor {
            conv1: Conv::resolve(store, &format!("{prefix}.conv1"), k, cfg.d_model, c)?,
            ln1: Norm::resolve(store, &format!("{prefix}.ln1"), c)?,
            conv2: Conv::resolve(store, &format!("{prefix}.conv2"), k, c, c)?,
            ln2: Norm::resolve(store, &format!("{prefix}.ln2"), c)?,
            out_w,
            out_b,
        })
    }

    /// One scalar per input row.
    fn apply(&self, x: &Tensor<f32>) -> Result<Vec<f32>, AcousticError> {
        let mut h = self.conv1.apply(x)?;
        relu_in_place(h.data_mut());
        let h = self.ln1.apply(&h)?;
        let mut h = self.conv2.apply(&h)?;
        relu_in_place(h.data_mut());
        let h = self.ln2.apply(&h)?;
        Ok(linear(&h, self.out_w, Some(self.out_b))?.into_data())
    }
}

/// Acoustic network bound to a parameter store (dense or INT8 weights).
pub struct Acoustic<'a> {
    cfg: AcousticConfig,
    phoneme_emb: &'a Tensor<f32>,
    pitch_emb: &'a Tensor<f32>,
    energy_emb: &'a Tensor<f32>,
    enc: Vec<FftBlock<'a>>,
    var: Vec<VariancePredictor<'a>>,
    dec: Vec<FftBlock<'a>>,
    mel_w: &'a dyn Projection<f32>,
    mel_b: &'a Tensor<f32>,
}

impl<'a> Acoustic<'a> {
    pub fn new(store: &'a ParamStore, cfg: &AcousticConfig) -> Result<Self, AcousticError> {
        cfg.validate()?;
        let d = cfg.d_model;
        store.shaped("emb.phoneme", &[cfg.phoneme_vocab, d])?;
        store.shaped("emb.pitch", &[cfg.n_var_bins, d])?;
        store.shaped("emb.energy", &[cfg.n_var_bins, d])?;
        let blocks = |stack: &str, n: usize| {
            (0..n).map(|i| FftBlock::resolve(store, cfg, &format!("{stack}.{i}"))).collect::<Result<Vec<_>, _>>()
        };
        let (mel_w, mel_b) = resolve_linear(store, "mel.w", "mel.b", d, cfg.n_mels)?;
        Ok(Acoustic {
            cfg: cfg.clone(),
            phoneme_emb: store.dense("emb.phoneme")?,
            pitch_emb: store.dense("emb.pitch")?,
            energy_emb: store.dense("emb.energy")?,
            enc: blocks("enc", cfg.n_enc_blocks)?,
            var: VARIANCE_HEADS
                .iter()
                .map(|h| VariancePredictor::resolve(store, cfg, &format!("var.{h}")))
                .collect::<Result<Vec<_>, _>>()?,
            dec: blocks("dec", cfg.n_dec_blocks)?,
            mel_w,
            mel_b,
        })
    }

    pub fn config(&self) -> &AcousticConfig {
        &self.cfg
    }

    /// Phoneme hidden states `[n × d_model]`.
    pub fn encode_phonemes(&self, phonemes: &[u32]) -> Result<Tensor<f32>, AcousticError> {
        if phonemes.is_empty() {
            return Err(AcousticError::EmptyInput);
        }
        let mut x = embedding_lookup(self.phoneme_emb, phonemes)?;
        add_in_place(&mut x, &sinusoidal_positions(phonemes.len(), self.cfg.d_model, 0))?;
        for block in &self.enc {
            x = block.apply(x, self.cfg.heads)?;
        }
        Ok(x)
    }

    pub fn predict_variances(&self, hidden: &Tensor<f32>) -> Result<Vec<VarianceFrame>, AcousticError> {
        let log_dur = self.var[0].apply(hidden)?;
        let pitch = self.var[1].apply(hidden)?;
        let energy = self.var[2].apply(hidden)?;
        let frames: Vec<VarianceFrame> = (0..hidden.outer())
            .map(|i| VarianceFrame { duration: duration_from_log(log_dur[i]), pitch: pitch[i], energy: energy[i] })
            .collect();
        if frames.iter().any(|f| !f.pitch.is_finite() || !f.energy.is_finite()) {
            return Err(AcousticError::Argument("non-finite pitch or energy prediction".into()));
        }
        Ok(frames)
    }

    /// Adds bucketed pitch and energy embeddings, given per frame.
    pub fn add_variance_embeddings(
        &self,
        mut expanded: Tensor<f32>,
        pitch: &[f32],
        energy: &[f32],
    ) -> Result<Tensor<f32>, AcousticError> {
        if pitch.len() != expanded.outer() || energy.len() != expanded.outer() {
            return Err(AcousticError::Argument(format!(
                "{} pitch / {} energy values for {} frames",
                pitch.len(),
                energy.len(),
                expanded.outer()
            )));
        }
        let bins = self.cfg.n_var_bins;
        let p_ids: Vec<u32> = pitch.iter().map(|&v| bucket(v, self.cfg.pitch_range, bins) as u32).collect();
        let e_ids: Vec<u32> = energy.iter().map(|&v| bucket(v, self.cfg.energy_range, bins) as u32).collect();
        add_in_place(&mut expanded, &embedding_lookup(self.pitch_emb, &p_ids)?)?;
        add_in_place(&mut expanded, &embedding_lookup(self.energy_emb, &e_ids)?)?;
        Ok(expanded)
    }

    pub fn decode_mel(&self, conditioned: Tensor<f32>) -> Result<MelSpectrogram, AcousticError> {
        if conditioned.outer() == 0 {
            return Err(AcousticError::EmptyInput);
        }
        let mut x = conditioned;
        let positions = sinusoidal_positions(x.outer(), self.cfg.d_model, 0);
        add_in_place(&mut x, &positions)?;
        for block in &self.dec {
            x = block.apply(x, self.cfg.heads)?;
        }
        let frames = linear(&x, self.mel_w, Some(self.mel_b))?;
        if !frames.is_finite() {
            return Err(AcousticError::Argument("non-finite mel output".into()));
        }
        Ok(MelSpectrogram { frames, frame_hop: self.cfg.frame_hop })
    }

    /// Phonemes to mel frames. If every duration rounds to zero the first
    /// phoneme is given one frame.
    pub fn infer(&self, phonemes: &[u32]) -> Result<(MelSpectrogram, Vec<VarianceFrame>), AcousticError> {
        let hidden = self.encode_phonemes(phonemes)?;
        let mut vars = self.predict_variances(&hidden)?;
        if vars.iter().all(|v| v.duration == 0) {
            vars[0].duration = 1;
        }
        let durations: Vec<i64> = vars.iter().map(|v| v.duration as i64).collect();
        let expanded = length_regulate(&hidden, &durations)?;
        let per_frame = |f: fn(&VarianceFrame) -> f32| -> Vec<f32> {
            vars.iter().flat_map(|v| std::iter::repeat_n(f(v), v.duration as usize)).collect()
        };
        let conditioned = self.add_variance_embeddings(expanded, &per_frame(|v| v.pitch), &per_frame(|v| v.energy))?;
        Ok((self.decode_mel(conditioned)?, vars))
    }
}

#[cfg(test)]
mod tests {
    use super::super::build_acoustic;
    use super::*;
    use crate::params::{Param, PhysicalParam};
    use crate::quant::CalibMethod;
    use crate::tensor::{layer_norm, LAYER_NORM_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> (AcousticConfig, ParamStore) {
        let cfg = AcousticConfig::toy();
        let store = build_acoustic(&cfg, seed).unwrap();
        (cfg, store)
    }

    #[test]
    fn duration_formula() {
        assert_eq!(duration_from_log(0.0), 0);
        assert_eq!(duration_from_log(3f32.ln()), 2);
        assert_eq!(duration_from_log(2.5f32.ln()), 2);
        assert_eq!(duration_from_log(-5.0), 0);
        assert_eq!(duration_from_log(f32::NAN), 0);
    }

    #[test]
    fn bucket_edges() {
        let r = (-2.0, 2.0);
        assert_eq!(bucket(-2.0, r, 256), 0);
        assert_eq!(bucket(-9.0, r, 256), 0);
        assert_eq!(bucket(2.0, r, 256), 255);
        assert_eq!(bucket(9.0, r, 256), 255);
        assert!((bucket(0.0, r, 256) as i64 - 128).abs() <= 1);
    }

    #[test]
    fn regulate_examples() {
        let h = Tensor::from_rows(&[vec![1.0f32], vec![2.0], vec![3.0]]).unwrap();
        let out = length_regulate(&h, &[2, 0, 3]).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 3.0, 3.0, 3.0]);
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
        assert!(matches!(length_regulate(&h, &[1, -1, 1]), Err(AcousticError::Argument(_))));
    }

    proptest! {
        #[test]
        fn regulate_conserves_rows(durs in proptest::collection::vec(0i64..6, 1..20)) {
            let n = durs.len();
            let h = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f32).collect()).unwrap();
            let out = length_regulate(&h, &durs).unwrap();
            prop_assert_eq!(out.outer() as i64, durs.iter().sum::<i64>());
        }
    }

    #[test]
    fn single_phoneme_shape_and_determinism() {
        let (cfg, store) = toy(1);
        let ac = Acoustic::new(&store, &cfg).unwrap();
        let h = ac.encode_phonemes(&[5]).unwrap();
        assert_eq!(h.shape(), &[1, cfg.d_model]);
        assert_eq!(h, ac.encode_phonemes(&[5]).unwrap());
        assert!(matches!(ac.encode_phonemes(&[]), Err(AcousticError::EmptyInput)));
    }

    #[test]
    fn zeroed_blocks_leave_residual_path() {
        let (cfg, mut store) = toy(2);
        let ids: Vec<usize> = store
            .slots()
            .filter(|(s, _)| s.starts_with("enc.") && (s.contains(".attn.") || s.contains(".conv")))
            .map(|(_, id)| id)
            .collect();
        for id in ids {
            let shape = store.physical(id).param.shape();
            let zero = PhysicalParam::new(Param::Dense(Tensor::zeros(shape)), crate::Dtype::F16).quantizable(true);
            store.replace(id, zero).unwrap();
        }
        let ac = Acoustic::new(&store, &cfg).unwrap();
        let phonemes = [4u32, 7, 9];
        let got = ac.encode_phonemes(&phonemes).unwrap();
        // reference: embedding + position through identity-affine norms
        let emb = store.dense("emb.phoneme").unwrap();
        let mut x = Tensor::zeros(vec![3, cfg.d_model]);
        for (r, &p) in phonemes.iter().enumerate() {
            for c in 0..cfg.d_model {
                let i = c / 2;
                let angle = r as f64 / 10000f64.powf(2.0 * i as f64 / cfg.d_model as f64);
                let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                x.row_mut(r)[c] = emb.at(p as usize, c) + pe as f32;
            }
        }
        let (g, b) = (Tensor::filled(vec![cfg.d_model], 1.0), Tensor::zeros(vec![cfg.d_model]));
        let eps = LAYER_NORM_EPS as f32;
        let mut reference = x;
        for _ in 0..2 * cfg.n_enc_blocks {
            reference = layer_norm(&reference, &g, &b, eps).unwrap();
        }
        assert!(got.max_abs_diff(&reference).unwrap() <= 1e-5);
    }

    #[test]
    fn durations_nonnegative_and_frames_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..40 {
            let (cfg, store) = toy(100 + trial);
            let ac = Acoustic::new(&store, &cfg).unwrap();
            let n = rng.gen_range(1..12);
            let ph: Vec<u32> = (0..n).map(|_| rng.gen_range(4..cfg.phoneme_vocab as u32)).collect();
            let (mel, vars) = ac.infer(&ph).unwrap();
            let total: u32 = vars.iter().map(|v| v.duration).sum();
            assert!(total >= 1);
            assert_eq!(mel.n_frames(), total as usize);
            assert_eq!(mel.n_mels(), cfg.n_mels);
            assert!(mel.frames.is_finite());
        }
    }

    #[test]
    fn quantized_model_keeps_shapes() {
        let (cfg, store) = toy(5);
        let mut q = store.clone();
        q.quantize(CalibMethod::MaxAbs).unwrap();
        let a = Acoustic::new(&store, &cfg).unwrap();
        let b = Acoustic::new(&q, &cfg).unwrap();
        let ph = [4u32, 5, 6, 7];
        let ha = a.encode_phonemes(&ph).unwrap();
        let hb = b.encode_phonemes(&ph).unwrap();
        assert_eq!(ha.shape(), hb.shape());
        let expanded = length_regulate(&ha, &[1, 2, 1, 1]).unwrap();
        let p = vec![0.1; 5];
        let ma = a.decode_mel(a.add_variance_embeddings(expanded.clone(), &p, &p).unwrap()).unwrap();
        let mb = b.decode_mel(b.add_variance_embeddings(expanded, &p, &p).unwrap()).unwrap();
        assert_eq!(ma.frames.shape(), mb.frames.shape());
        let mean = ma.frames.data().iter().zip(mb.frames.data()).map(|(x, y)| (x - y).abs()).sum::<f32>()
            / ma.frames.len() as f32;
        println!("int8 vs fp mel mean |delta| = {mean:.3e}");
        assert!(mean.is_finite());
    }
}
