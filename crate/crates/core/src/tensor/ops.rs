use super::{Tensor, TensorError};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A weight that maps `[m × in]` activations to `[m × out]`.
///
/// Implemented by dense tensors (`x · W` with `W: [in × out]`) and by INT8
/// quantized tensors, so layers can be written once for both storages.
pub trait Projection<T: Scalar>: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError>;
}

impl<T: Scalar> Projection<T> for Tensor<T> {
    fn in_dim(&self) -> usize {
        self.rows()
    }

    fn out_dim(&self) -> usize {
        self.cols()
    }

    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        matmul(x, self)
    }
}

/// `out += x · W` for a row vector `x: [k]` and `W: [k × n]` stored row-major.
///
/// Each output element accumulates over `k` in ascending order, one product
/// at a time, so results are bit-identical to the plain row-dot form.
#[inline]
pub fn vec_mat_into<T: Scalar>(x: &[T], w: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(w.len(), x.len() * n);
    debug_assert_eq!(out.len(), n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { vec_mat_avx2(x, w, n, out) };
        return;
    }
    vec_mat_portable(x, w, n, out);
}

// Separate multiply and add (no FMA) keeps rounding identical to the
// portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn vec_mat_avx2<T: Scalar>(x: &[T], w: &[T], n: usize, out: &mut [T]) {
    vec_mat_portable(x, w, n, out);
}

#[inline(always)]
fn vec_mat_portable<T: Scalar>(x: &[T], w: &[T], n: usize, out: &mut [T]) {
    let out = &mut out[..n];
    let mut rows = x.chunks_exact(4);
    let mut p = 0;
    for xs in rows.by_ref() {
        let (x0, x1, x2, x3) = (xs[0], xs[1], xs[2], xs[3]);
        let w0 = &w[p * n..(p + 1) * n];
        let w1 = &w[(p + 1) * n..(p + 2) * n];
        let w2 = &w[(p + 2) * n..(p + 3) * n];
        let w3 = &w[(p + 3) * n..(p + 4) * n];
        for i in 0..n {
            let mut o = out[i];
            o += x0 * w0[i];
            o += x1 * w1[i];
            o += x2 * w2[i];
            o += x3 * w3[i];
            out[i] = o;
        }
        p += 4;
    }
    for &xv in rows.remainder() {
        let wrow = &w[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
        p += 1;
    }
}

/// Weight bytes per band of the blocked product; sized to sit in L2.
const MATMUL_BAND_BYTES: usize = 512 * 1024;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(TensorError::shape(
            "matmul",
            format!("operands must be 2-D, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::shape("matmul", format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    // a band of `b` rows stays cache resident while every row of `a` uses it;
    // bands run in ascending order, so each sum keeps its plain order
    let band = (MATMUL_BAND_BYTES / (n.max(1) * std::mem::size_of::<T>())).max(4) / 4 * 4;
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + band).min(k);
        let w = &b.data()[p0 * n..p1 * n];
        for i in 0..m {
            vec_mat_into(&a.data()[i * k + p0..i * k + p1], w, n, &mut out[i * n..(i + 1) * n]);
        }
        p0 = p1;
    }
    Tensor::new(vec![m, n], out)
}

/// Adds a `[n]` bias to every row of a `[* × n]` tensor.
pub fn add_bias_rows<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<(), TensorError> {
    let n = x.cols();
    if bias.len() != n {
        return Err(TensorError::shape("add_bias", format!("bias has {} values, rows have {n}", bias.len())));
    }
    for r in 0..x.outer() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// `x · W + b`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &dyn Projection<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    let mut y = w.project(x)?;
    if let Some(b) = b {
        add_bias_rows(&mut y, b)?;
    }
    Ok(y)
}

pub fn add_in_place<T: Scalar>(x: &mut Tensor<T>, other: &Tensor<T>) -> Result<(), TensorError> {
    if x.shape() != other.shape() {
        return Err(TensorError::shape("add", format!("{:?} vs {:?}", x.shape(), other.shape())));
    }
    for (a, &b) in x.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
    Ok(())
}

pub fn relu_in_place<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// "Same"-padded 1-D convolution.
///
/// `x: [T × C_in]`, `w: [K × C_in × C_out]`, `b: [C_out]`. Output position
/// `t` sums `x[t + k - K/2] · w[k]` over `k` then `c_in` (both ascending),
/// treating out-of-range positions as zeros, then adds the bias.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if w.ndim() != 3 {
        return Err(TensorError::shape("conv1d", format!("kernel must be 3-D, got {:?}", w.shape())));
    }
    let (k, c_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if k % 2 == 0 {
        return Err(TensorError::config("conv1d", format!("kernel size {k} must be odd")));
    }
    if x.ndim() != 2 || x.shape()[1] != c_in {
        return Err(TensorError::shape(
            "conv1d",
            format!("input {:?} does not match kernel {:?}", x.shape(), w.shape()),
        ));
    }
    if b.len() != c_out {
        return Err(TensorError::shape("conv1d", format!("bias {:?} vs C_out {c_out}", b.shape())));
    }
    let t_len = x.shape()[0];
    let pad = k / 2;
    let mut out = Tensor::zeros(vec![t_len, c_out]);
    for t in 0..t_len {
        let acc = out.row_mut(t);
        for kk in 0..k {
            let Some(src) = (t + kk).checked_sub(pad).filter(|&s| s < t_len) else {
                continue;
            };
            let tap = &w.data()[kk * c_in * c_out..(kk + 1) * c_in * c_out];
            vec_mat_into(x.row(src), tap, c_out, acc);
        }
    }
    add_bias_rows(&mut out, b)?;
    Ok(out)
}

/// Layer normalization over the last dimension.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let d = x.cols();
    if d == 0 || gamma.len() != d || beta.len() != d {
        return Err(TensorError::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let n = T::from_usize_lossy(d);
    let mut out = x.clone();
    for r in 0..x.outer() {
        let row = out.row_mut(r);
        let mut sum = T::zero();
        for &v in row.iter() {
            sum += v;
        }
        let mean = sum / n;
        let mut sq = T::zero();
        for &v in row.iter() {
            sq += (v - mean) * (v - mean);
        }
        let inv = T::one() / (sq / n + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along the last dimension.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..x.outer() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, TensorError> {
    if table.ndim() != 2 {
        return Err(TensorError::shape("embedding", format!("table {:?} is not 2-D", table.shape())));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(TensorError::Index { index: id, len: v });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Fixed sinusoidal position encodings for positions `offset..offset+len`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize, offset: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(vec![len, d]);
    for p in 0..len {
        let pos = (p + offset) as f64;
        let row = out.row_mut(p);
        for (i, v) in row.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * pair / d as f64);
            *v = T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(vec![3, 4], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0f32], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(vec![7, 5], &mut rng);
        let b = random(vec![5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0f32;
                for p in 0..5 {
                    acc += a.at(i, p) * b.at(p, j);
                }
                assert_eq!(c.at(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &a), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![6, 4], &mut rng);
        let w = Tensor::identity(4).reshape(vec![1, 4, 4]).unwrap();
        let y = conv1d(&x, &w, &Tensor::zeros(vec![4])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(vec![3, 2, 5], &mut rng);
        let b = random(vec![5], &mut rng);
        let y = conv1d(&Tensor::zeros(vec![4, 2]), &w, &b).unwrap();
        for t in 0..4 {
            assert_eq!(y.row(t), b.data());
        }
    }

    #[test]
    fn conv1d_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t_len, k, c_in, c_out) = (9, 3, 4, 5);
        let x = random(vec![t_len, c_in], &mut rng);
        let w = random(vec![k, c_in, c_out], &mut rng);
        let b = random(vec![c_out], &mut rng);
        let y = conv1d(&x, &w, &b).unwrap();
        // zero-pad explicitly, then slide
        let mut padded = vec![vec![0.0f32; c_in]; t_len + 2];
        for t in 0..t_len {
            padded[t + 1].copy_from_slice(x.row(t));
        }
        for t in 0..t_len {
            for co in 0..c_out {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    for (ci, &v) in padded[t + kk].iter().enumerate() {
                        acc += v * w.data()[(kk * c_in + ci) * c_out + co];
                    }
                }
                assert_eq!(y.at(t, co), acc + b.data()[co], "t={t} co={co}");
            }
        }
    }

    #[test]
    fn conv1d_even_kernel_rejected() {
        let w = Tensor::<f32>::zeros(vec![2, 1, 1]);
        let r = conv1d(&Tensor::zeros(vec![3, 1]), &w, &Tensor::zeros(vec![1]));
        assert!(matches!(r, Err(TensorError::Config { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::filled(vec![1, 6], 3.5f32);
        let y = layer_norm(&x, &Tensor::filled(vec![6], 1.0), &Tensor::zeros(vec![6]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![3, 8], &mut rng);
        let beta = random(vec![8], &mut rng);
        let y = layer_norm(&x, &Tensor::zeros(vec![8]), &beta, 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), beta.data());
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(vec![1, 64], &mut rng);
        let y = layer_norm(&x, &Tensor::filled(vec![64], 1.0), &Tensor::zeros(vec![64]), 1e-5).unwrap();
        let mean: f64 = y.data().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var: f64 = y.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "var {var}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&Tensor::vector(vec![0.3f32; 4]));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let y = softmax(&Tensor::vector(vec![1000.0f32, 0.0]));
        assert!((y.data()[0] - 1.0).abs() < 1e-7);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_vs_extended_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(vec![11], &mut rng).map(|v| v * 5.0);
        let y = softmax(&x);
        let exps: Vec<f64> = x.data().iter().map(|&v| (v as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in y.data().iter().zip(&exps) {
            assert!((*got as f64 - e / total).abs() <= 1e-6);
        }
    }

    #[test]
    fn embedding_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = random(vec![5, 3], &mut rng);
        assert_eq!(embedding_lookup(&table, &[]).unwrap().shape(), &[0, 3]);
        let e = embedding_lookup(&table, &[4, 4]).unwrap();
        assert_eq!(e.row(0), table.row(4));
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(embedding_lookup(&table, &[5]), Err(TensorError::Index { index: 5, len: 5 }));
    }

    #[test]
    fn positions_differ_by_offset() {
        let a: Tensor<f32> = sinusoidal_positions(3, 8, 0);
        let b: Tensor<f32> = sinusoidal_positions(2, 8, 1);
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(0)[0], 0.0);
        assert_eq!(a.row(0)[1], 1.0);
    }
}
