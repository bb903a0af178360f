use rand::distributions::{Distribution, WeightedIndex};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mulaw::{class_to_pcm, CENTER};
use super::{VocoderConfig, VocoderError};
use crate::acoustic::MelSpectrogram;
use crate::dtype::Dtype;
use crate::params::{Param, ParamError, ParamStore};
use crate::sparse::BlockSparseMatrix;
use crate::tensor::{
    gru_cell_with, linear, softmax_in_place, vec_mat_into, DenseMatVec, HalfMatVec, MatVec, Tensor, TensorError,
};

/// Counts every call into the wrapped generator.
#[derive(Debug, Clone)]
pub struct CountingRng<R> {
    inner: R,
    draws: u64,
}

impl<R> CountingRng<R> {
    pub fn new(inner: R) -> Self {
        CountingRng { inner, draws: 0 }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }
}

impl<R: RngCore> RngCore for CountingRng<R> {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.draws += 1;
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.draws += 1;
        self.inner.try_fill_bytes(dest)
    }
}

/// Draws one index with probability proportional to `probs`.
pub fn sample_categorical(probs: &[f32], rng: &mut impl RngCore) -> Result<usize, VocoderError> {
    let dist = WeightedIndex::new(probs)
        .map_err(|e| VocoderError::Argument(format!("cannot sample from distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// Recurrent state of one generation session.
#[derive(Debug, Clone)]
pub struct VocoderState {
    pub hidden: Vec<f32>,
    /// Classes emitted by the previous iteration (branch A, branch B).
    pub prev: (u8, u8),
    pub rng: CountingRng<ChaCha8Rng>,
    pub iterations: usize,
}

impl VocoderState {
    pub fn new(cfg: &VocoderConfig, seed: u64) -> Self {
        VocoderState {
            hidden: vec![0.0; cfg.h],
            prev: (CENTER, CENTER),
            rng: CountingRng::new(ChaCha8Rng::seed_from_u64(seed)),
            iterations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
    pub iterations: usize,
    /// Generator calls consumed while sampling.
    pub rng_draws: u64,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Both branch outputs of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub class_a: u8,
    pub class_b: u8,
    pub logits_a: Vec<f32>,
    pub logits_b: Vec<f32>,
}

enum Mat<'a> {
    Dense(DenseMatVec<f32>),
    Half(HalfMatVec),
    Sparse(&'a BlockSparseMatrix<f32>),
}

impl<'a> Mat<'a> {
    fn resolve(store: &'a ParamStore, slot: &str, rows: usize, cols: usize) -> Result<Self, VocoderError> {
        store.shaped(slot, &[rows, cols])?;
        let entry = store.entry(slot)?;
        Ok(match &entry.param {
            // f16-stored values are exact in binary16, so the half kernel is lossless
            Param::Dense(t) if entry.storage == Dtype::F16 => Mat::Half(HalfMatVec::from_matrix(t)?),
            Param::Dense(t) => Mat::Dense(DenseMatVec::from_matrix(t)?),
            Param::Sparse(m) => Mat::Sparse(m),
            Param::Quantized(_) => {
                return Err(ParamError::Kind {
                    slot: slot.to_string(),
                    expected: "dense or block-sparse",
                    found: "int8",
                }
                .into())
            }
        })
    }

    /// A dense `[rows × cols]` slot applied as `x · W`. The column-major
    /// form of `Wᵀ` is `W` row-major, so the summation order is unchanged.
    fn transposed(store: &'a ParamStore, slot: &str, rows: usize, cols: usize) -> Result<Self, VocoderError> {
        store.shaped(slot, &[rows, cols])?;
        let entry = store.entry(slot)?;
        let t = store.dense(slot)?.transpose()?;
        Ok(if entry.storage == Dtype::F16 {
            Mat::Half(HalfMatVec::from_matrix(&t)?)
        } else {
            Mat::Dense(DenseMatVec::from_matrix(&t)?)
        })
    }

    fn provider(&self) -> &dyn MatVec<f32> {
        match self {
            Mat::Dense(m) => m,
            Mat::Half(m) => m,
            Mat::Sparse(m) => *m,
        }
    }

    fn apply(&self, x: &[f32], bias: &Tensor<f32>) -> Result<Vec<f32>, TensorError> {
        let mut out = vec![0.0; bias.len()];
        self.provider().matvec_into(x, &mut out)?;
        for (o, b) in out.iter_mut().zip(bias.data()) {
            *o += b;
        }
        Ok(out)
    }
}

struct PostNet<'a> {
    fc1: Mat<'a>,
    b1: &'a Tensor<f32>,
    fc2: Mat<'a>,
    b2: &'a Tensor<f32>,
}

impl<'a> PostNet<'a> {
    fn resolve(store: &'a ParamStore, cfg: &VocoderConfig, branch: &str) -> Result<Self, VocoderError> {
        store.shaped(&format!("{branch}.fc1.b"), &[cfg.d])?;
        store.shaped(&format!("{branch}.fc2.b"), &[cfg.n_classes])?;
        Ok(PostNet {
            fc1: Mat::resolve(store, &format!("{branch}.fc1.w"), cfg.d, cfg.h)?,
            b1: store.dense(&format!("{branch}.fc1.b"))?,
            fc2: Mat::resolve(store, &format!("{branch}.fc2.w"), cfg.n_classes, cfg.d)?,
            b2: store.dense(&format!("{branch}.fc2.b"))?,
        })
    }

    fn logits(&self, h: &[f32]) -> Result<Vec<f32>, TensorError> {
        let mut t = self.fc1.apply(h, self.b1)?;
        for v in &mut t {
            *v = v.max(0.0);
        }
        self.fc2.apply(&t, self.b2)
    }
}

/// Vocoder network bound to a parameter store.
pub struct Vocoder<'a> {
    cfg: VocoderConfig,
    cond_w: &'a Tensor<f32>,
    cond_b: &'a Tensor<f32>,
    emb: &'a Tensor<f32>,
    /// Input weight as an `[3h × in]` provider.
    w_ih: Mat<'a>,
    w_hh: Mat<'a>,
    gru_b: &'a Tensor<f32>,
    b_cond_w: &'a Tensor<f32>,
    b_cond_b: &'a Tensor<f32>,
    a: PostNet<'a>,
    b: PostNet<'a>,
}

impl<'a> Vocoder<'a> {
    pub fn new(store: &'a ParamStore, cfg: &VocoderConfig) -> Result<Self, VocoderError> {
        cfg.validate()?;
        let (h, e) = (cfg.h, cfg.embed_dim);
        let dense = |slot: &str, shape: &[usize]| -> Result<&'a Tensor<f32>, ParamError> {
            store.shaped(slot, shape)?;
            store.dense(slot)
        };
        Ok(Vocoder {
            cfg: cfg.clone(),
            cond_w: dense("cond.w", &[cfg.n_mels, cfg.cond_dim])?,
            cond_b: dense("cond.b", &[cfg.cond_dim])?,
            emb: dense("emb.sample", &[cfg.n_classes, e])?,
            w_ih: Mat::transposed(store, "gru.w_ih", cfg.gru_input(), 3 * h)?,
            w_hh: Mat::resolve(store, "gru.w_hh", 3 * h, h)?,
            gru_b: dense("gru.b", &[3 * h])?,
            b_cond_w: dense("b.cond.w", &[e, h])?,
            b_cond_b: dense("b.cond.b", &[h])?,
            a: PostNet::resolve(store, cfg, "a")?,
            b: PostNet::resolve(store, cfg, "b")?,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    fn check_mel(&self, mel: &MelSpectrogram) -> Result<(), VocoderError> {
        if mel.n_frames() == 0 {
            return Err(VocoderError::Argument("empty mel spectrogram".into()));
        }
        if mel.n_mels() != self.cfg.n_mels || mel.frame_hop != self.cfg.frame_hop {
            return Err(VocoderError::Argument(format!(
                "mel has {} bins at hop {}, vocoder expects {} at hop {}",
                mel.n_mels(),
                mel.frame_hop,
                self.cfg.n_mels,
                self.cfg.frame_hop
            )));
        }
        Ok(())
    }

    /// Projected conditioning per frame `[T × cond_dim]`.
    pub fn frame_conditioning(&self, mel: &MelSpectrogram) -> Result<Tensor<f32>, VocoderError> {
        self.check_mel(mel)?;
        Ok(linear(&mel.frames, self.cond_w, Some(self.cond_b))?)
    }

    /// One conditioning vector per iteration: each frame's projection
    /// repeated `frame_hop / 2` times.
    pub fn upsample_conditioning(&self, mel: &MelSpectrogram) -> Result<Tensor<f32>, VocoderError> {
        let per_frame = self.frame_conditioning(mel)?;
        let reps = self.cfg.iterations_per_frame();
        let mut out = Vec::with_capacity(per_frame.len() * reps);
        for t in 0..per_frame.outer() {
            for _ in 0..reps {
                out.extend_from_slice(per_frame.row(t));
            }
        }
        Ok(Tensor::new(vec![per_frame.outer() * reps, self.cfg.cond_dim], out)?)
    }

    fn sample(logits: &[f32], rng: &mut CountingRng<ChaCha8Rng>) -> Result<u8, VocoderError> {
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        Ok(sample_categorical(&probs, rng)? as u8)
    }

    /// One iteration: GRU update, then branch A and branch B (which sees
    /// branch A's class) each sample one class.
    pub fn step_traced(&self, state: &mut VocoderState, cond: &[f32]) -> Result<StepTrace, VocoderError> {
        if cond.len() != self.cfg.cond_dim {
            return Err(VocoderError::Argument(format!(
                "conditioning of {} values, expected {}",
                cond.len(),
                self.cfg.cond_dim
            )));
        }
        let mut x = Vec::with_capacity(self.cfg.gru_input());
        x.extend_from_slice(cond);
        x.extend_from_slice(self.emb.row(state.prev.0 as usize));
        x.extend_from_slice(self.emb.row(state.prev.1 as usize));
        let h = gru_cell_with(&x, &state.hidden, self.w_ih.provider(), self.w_hh.provider(), self.gru_b)?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(VocoderError::Numeric { iteration: state.iterations });
        }
        let logits_a = self.a.logits(&h)?;
        let class_a = Self::sample(&logits_a, &mut state.rng)?;
        let mut hb = h.clone();
        let mut proj = self.b_cond_b.data().to_vec();
        vec_mat_into(self.emb.row(class_a as usize), self.b_cond_w.data(), self.cfg.h, &mut proj);
        for (v, p) in hb.iter_mut().zip(&proj) {
            *v += p;
        }
        let logits_b = self.b.logits(&hb)?;
        let class_b = Self::sample(&logits_b, &mut state.rng)?;
        state.hidden = h;
        state.prev = (class_a, class_b);
        state.iterations += 1;
        Ok(StepTrace { class_a, class_b, logits_a, logits_b })
    }

    pub fn step(&self, state: &mut VocoderState, cond: &[f32]) -> Result<(u8, u8), VocoderError> {
        let t = self.step_traced(state, cond)?;
        Ok((t.class_a, t.class_b))
    }

    /// Generates `frames × frame_hop` samples, handing them to `sink` in
    /// chunks of `chunk_samples` (the last chunk may be shorter).
    pub fn generate_streaming(
        &self,
        mel: &MelSpectrogram,
        seed: u64,
        sink: &mut dyn FnMut(&[i16]) -> std::io::Result<()>,
    ) -> Result<(usize, u64), VocoderError> {
        let frames = self.frame_conditioning(mel)?;
        let reps = self.cfg.iterations_per_frame();
        let chunk = self.cfg.chunk_samples;
        let mut state = VocoderState::new(&self.cfg, seed);
        let mut buf: Vec<i16> = Vec::with_capacity(chunk + 2);
        let io = |e: std::io::Error| VocoderError::Argument(format!("sample sink failed: {e}"));
        for t in 0..frames.outer() {
            let cond = frames.row(t);
            for _ in 0..reps {
                let (a, b) = self.step(&mut state, cond)?;
                buf.push(class_to_pcm(a));
                buf.push(class_to_pcm(b));
                while buf.len() >= chunk {
                    sink(&buf[..chunk]).map_err(io)?;
                    buf.drain(..chunk);
                }
            }
        }
        if !buf.is_empty() {
            sink(&buf).map_err(io)?;
        }
        Ok((state.iterations, state.rng.draws()))
    }

    pub fn generate(&self, mel: &MelSpectrogram, seed: u64) -> Result<Waveform, VocoderError> {
        let mut samples = Vec::with_capacity(mel.n_samples());
        let (iterations, rng_draws) = self.generate_streaming(mel, seed, &mut |c| {
            samples.extend_from_slice(c);
            Ok(())
        })?;
        Ok(Waveform { samples, sample_rate: self.cfg.sample_rate, iterations, rng_draws })
    }
}
