use half::f16;

use super::gru::MatVec;
use super::{Tensor, TensorError};

/// Column-major matrix held as IEEE binary16 and widened to `f32` inside the
/// kernel, halving the memory traffic of a matrix-vector product.
///
/// Accumulation matches [`super::DenseMatVec`]: per output, ascending column,
/// one multiply then one add. For weights already rounded to binary16 the
/// two give bit-identical results.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfMatVec {
    rows: usize,
    cols: usize,
    by_column: Vec<f16>,
}

impl HalfMatVec {
    /// Rounds each value to binary16; lossless for f16-stored weights.
    pub fn from_matrix(m: &Tensor<f32>) -> Result<Self, TensorError> {
        let t = m.transpose()?;
        Ok(HalfMatVec {
            rows: m.shape()[0],
            cols: m.shape()[1],
            by_column: t.data().iter().map(|&v| f16::from_f32(v)).collect(),
        })
    }

    fn accumulate_portable(&self, x: &[f32], out: &mut [f32]) {
        let n = self.rows;
        for (p, &xv) in x.iter().enumerate() {
            let col = &self.by_column[p * n..(p + 1) * n];
            for (o, w) in out.iter_mut().zip(col) {
                *o += xv * w.to_f32();
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,f16c")]
    unsafe fn accumulate_f16c(&self, x: &[f32], out: &mut [f32]) {
        use std::arch::x86_64::*;
        let n = self.rows;
        let w = self.by_column.as_ptr() as *const u16;
        let lanes = n / 8 * 8;
        let mut p = 0;
        while p + 4 <= x.len() {
            let cols = [w.add(p * n), w.add((p + 1) * n), w.add((p + 2) * n), w.add((p + 3) * n)];
            let xs =
                [_mm256_set1_ps(x[p]), _mm256_set1_ps(x[p + 1]), _mm256_set1_ps(x[p + 2]), _mm256_set1_ps(x[p + 3])];
            let mut i = 0;
            while i < lanes {
                let mut o = _mm256_loadu_ps(out.as_ptr().add(i));
                for k in 0..4 {
                    let wk = _mm256_cvtph_ps(_mm_loadu_si128(cols[k].add(i) as *const __m128i));
                    o = _mm256_add_ps(o, _mm256_mul_ps(xs[k], wk));
                }
                _mm256_storeu_ps(out.as_mut_ptr().add(i), o);
                i += 8;
            }
            for (i, o) in out.iter_mut().enumerate().skip(lanes) {
                for k in 0..4 {
                    *o += x[p + k] * f16::from_bits(*cols[k].add(i)).to_f32();
                }
            }
            p += 4;
        }
        for (q, &xv) in x.iter().enumerate().skip(p) {
            let col = &self.by_column[q * n..(q + 1) * n];
            for (o, wv) in out.iter_mut().zip(col) {
                *o += xv * wv.to_f32();
            }
        }
    }
}

impl MatVec<f32> for HalfMatVec {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn matvec_into(&self, x: &[f32], out: &mut [f32]) -> Result<(), TensorError> {
        if x.len() != self.cols || out.len() != self.rows {
            return Err(TensorError::shape(
                "matvec",
                format!("[{} x {}] matrix with x of {} and out of {}", self.rows, self.cols, x.len(), out.len()),
            ));
        }
        out.fill(0.0);
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("f16c") {
            // SAFETY: both features were detected just above.
            unsafe { self.accumulate_f16c(x, out) };
            return Ok(());
        }
        self.accumulate_portable(x, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::snap_f16;
    use crate::tensor::DenseMatVec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_on_f16_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // odd sizes exercise the scalar tails in both directions
        for (r, c) in [(1, 1), (7, 3), (16, 4), (37, 13), (64, 9)] {
            let m =
                Tensor::new(vec![r, c], (0..r * c).map(|_| snap_f16(rng.gen_range(-1.0f32..1.0))).collect()).unwrap();
            let x: Vec<f32> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (mut a, mut b) = (vec![0.0; r], vec![0.0; r]);
            HalfMatVec::from_matrix(&m).unwrap().matvec_into(&x, &mut a).unwrap();
            DenseMatVec::from_matrix(&m).unwrap().matvec_into(&x, &mut b).unwrap();
            assert_eq!(a, b, "{r}x{c}");
            let mut p = vec![0.0; r];
            HalfMatVec::from_matrix(&m).unwrap().accumulate_portable(&x, &mut p);
            assert_eq!(p, b, "{r}x{c} portable");
        }
    }

    #[test]
    fn rejects_bad_lengths() {
        let h = HalfMatVec::from_matrix(&Tensor::zeros(vec![3, 2])).unwrap();
        assert!(h.matvec_into(&[0.0; 3], &mut [0.0; 3]).is_err());
    }
}
