//! Weight-only symmetric INT8 post-training quantization.
//!
//! One positive scale per tensor, zero point fixed at 0, codes in
//! `[-127, 127]` (−128 is never produced). Activations stay in floating point;
//! [`qmatmul`] and [`qconv1d`] accumulate `x · q` and apply the scale once.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{add_bias_rows, Projection, Tensor, TensorError};

/// Smallest scale handed out, so all-zero tensors still get a valid one.
pub const MIN_SCALE: f32 = 1e-12;
pub const QMAX: i32 = 127;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("cannot calibrate an empty tensor")]
    Empty,
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f32),
    #[error("percentile must be in (0, 100], got {0}")]
    BadPercentile(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<QuantError> for TensorError {
    fn from(e: QuantError) -> Self {
        TensorError::shape("quantized", e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibMethod {
    MaxAbs,
    /// Scale from the p-th percentile (nearest rank) of `|w|`.
    Percentile(f64),
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibMethod::MaxAbs => write!(f, "maxabs"),
            CalibMethod::Percentile(p) => write!(f, "percentile({p})"),
        }
    }
}

impl std::str::FromStr for CalibMethod {
    type Err = String;

    /// Accepts `maxabs`, `percentile` (99.9) or `percentile:<p>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "maxabs" => Ok(CalibMethod::MaxAbs),
            "percentile" => Ok(CalibMethod::Percentile(99.9)),
            _ => s
                .strip_prefix("percentile:")
                .and_then(|p| p.parse::<f64>().ok())
                .filter(|p| *p > 0.0 && *p <= 100.0)
                .map(CalibMethod::Percentile)
                .ok_or_else(|| format!("unknown calibration method `{s}`")),
        }
    }
}

/// INT8 tensor with a per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensorI8 {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f32,
}

impl QTensorI8 {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, scale: f32) -> Result<Self, QuantError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::BadScale(scale));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(QuantError::Shape(format!("{shape:?} vs {} codes", data.len())));
        }
        if data.contains(&i8::MIN) {
            return Err(QuantError::Shape("code -128 is outside the symmetric range".into()));
        }
        Ok(QTensorI8 { shape, data, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibReport {
    pub name: String,
    pub max_abs: f32,
    pub scale: f32,
    pub max_err: f32,
}

impl CalibReport {
    pub fn within_bound(&self) -> bool {
        self.max_err as f64 <= self.scale as f64 / 2.0 + 1e-7
    }
}

pub fn calibrate<T: Scalar>(w: &Tensor<T>, method: CalibMethod) -> Result<f32, QuantError> {
    if w.is_empty() {
        return Err(QuantError::Empty);
    }
    let reference = match method {
        CalibMethod::MaxAbs => w.max_abs().to_f64_lossy(),
        CalibMethod::Percentile(p) => {
            if !(p > 0.0 && p <= 100.0) {
                return Err(QuantError::BadPercentile(p));
            }
            let mut mags: Vec<f64> = w.data().iter().map(|v| v.to_f64_lossy().abs()).collect();
            // nearest rank, guarding against 99.9/100*1000 landing a hair above 999
            let rank = (p * mags.len() as f64 / 100.0 - 1e-9).ceil().max(1.0) as usize - 1;
            let (_, nth, _) = mags.select_nth_unstable_by(rank, f64::total_cmp);
            *nth
        }
    };
    Ok(((reference / QMAX as f64) as f32).max(MIN_SCALE))
}

/// `q = clamp(round_half_even(w / scale), -127, 127)`.
pub fn quantize<T: Scalar>(w: &Tensor<T>, scale: f32) -> Result<QTensorI8, QuantError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(QuantError::BadScale(scale));
    }
    let s = scale as f64;
    let data = w
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy() / s).round_ties_even().clamp(-(QMAX as f64), QMAX as f64) as i8)
        .collect();
    Ok(QTensorI8 { shape: w.shape().to_vec(), data, scale })
}

pub fn dequantize<T: Scalar>(q: &QTensorI8) -> Tensor<T> {
    let s = T::from_f64_lossy(q.scale as f64);
    let data = q.data.iter().map(|&c| T::from_f64_lossy(c as f64) * s).collect();
    Tensor::new(q.shape.clone(), data).expect("validated at construction")
}

/// Calibrates, quantizes and measures the round-trip error of one tensor.
pub fn quantize_with_report(
    name: &str,
    w: &Tensor<f32>,
    method: CalibMethod,
) -> Result<(QTensorI8, CalibReport), QuantError> {
    let scale = calibrate(w, method)?;
    let q = quantize(w, scale)?;
    // measured in f64 so the f32 rounding of `code * scale` (about one ulp of
    // the weight) is not charged to the quantizer
    let back: Tensor<f64> = dequantize(&q);
    let max_err = back.max_abs_diff(&w.cast::<f64>()).expect("same shape") as f32;
    let report = CalibReport { name: name.to_string(), max_abs: w.max_abs(), scale, max_err };
    Ok((q, report))
}

/// `x · dequantize(qw)` with the scale applied once per output element.
pub fn qmatmul<T: Scalar>(x: &Tensor<T>, qw: &QTensorI8) -> Result<Tensor<T>, QuantError> {
    if x.ndim() != 2 || qw.shape.len() != 2 || x.shape()[1] != qw.shape[0] {
        return Err(QuantError::Shape(format!("{:?} x {:?}", x.shape(), qw.shape)));
    }
    let (m, n) = (x.shape()[0], qw.shape[1]);
    let scale = T::from_f64_lossy(qw.scale as f64);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        accumulate_codes(x.row(i), &qw.data, n, row);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(Tensor::new(vec![m, n], out).expect("consistent dims"))
}

#[inline]
fn accumulate_codes<T: Scalar>(x: &[T], codes: &[i8], n: usize, out: &mut [T]) {
    for (p, &xv) in x.iter().enumerate() {
        let crow = &codes[p * n..(p + 1) * n];
        for (o, &c) in out.iter_mut().zip(crow) {
            *o += xv * T::from_f64_lossy(c as f64);
        }
    }
}

/// Same-padded 1-D convolution with an INT8 kernel `[K × C_in × C_out]`.
pub fn qconv1d<T: Scalar>(x: &Tensor<T>, qw: &QTensorI8, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if qw.shape.len() != 3 {
        return Err(TensorError::shape("qconv1d", format!("kernel {:?} is not 3-D", qw.shape)));
    }
    let (k, c_in, c_out) = (qw.shape[0], qw.shape[1], qw.shape[2]);
    if k % 2 == 0 {
        return Err(TensorError::config("qconv1d", format!("kernel size {k} must be odd")));
    }
    if x.ndim() != 2 || x.shape()[1] != c_in {
        return Err(TensorError::shape("qconv1d", format!("input {:?} vs kernel {:?}", x.shape(), qw.shape)));
    }
    let t_len = x.shape()[0];
    let pad = k / 2;
    let scale = T::from_f64_lossy(qw.scale as f64);
    let mut out = Tensor::zeros(vec![t_len, c_out]);
    for t in 0..t_len {
        let acc = out.row_mut(t);
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(pad).filter(|&s| s < t_len) else {
                continue;
            };
            let tap = &qw.data[kk * c_in * c_out..(kk + 1) * c_in * c_out];
            accumulate_codes(x.row(src), tap, c_out, acc);
        }
        for v in acc.iter_mut() {
            *v *= scale;
        }
    }
    add_bias_rows(&mut out, b)?;
    Ok(out)
}

impl<T: Scalar> Projection<T> for QTensorI8 {
    fn in_dim(&self) -> usize {
        self.shape[0]
    }

    fn out_dim(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        Ok(qmatmul(x, self)?)
    }
}
