use super::ops::vec_mat_into;
use super::{Tensor, TensorError};
use crate::scalar::{sigmoid, Scalar};

/// Anything that can compute `y = M · x` for a fixed `[rows × cols]` matrix.
///
/// The recurrent weight of the GRU goes through this trait so the vocoder
/// can hand in a block-sparse matrix where a dense one would otherwise sit.
pub trait MatVec<T: Scalar>: Send + Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// Overwrites `out` (length `rows`) with `M · x`.
    fn matvec_into(&self, x: &[T], out: &mut [T]) -> Result<(), TensorError>;
}

fn check_matvec(rows: usize, cols: usize, x: usize, out: usize) -> Result<(), TensorError> {
    if x != cols || out != rows {
        return Err(TensorError::shape("matvec", format!("[{rows} x {cols}] matrix with x of {x} and out of {out}")));
    }
    Ok(())
}

/// Row-major `[rows × cols]` tensor; one dot product per row.
impl<T: Scalar> MatVec<T> for Tensor<T> {
    fn rows(&self) -> usize {
        self.shape()[0]
    }

    fn cols(&self) -> usize {
        self.shape()[1]
    }

    fn matvec_into(&self, x: &[T], out: &mut [T]) -> Result<(), TensorError> {
        if self.ndim() != 2 {
            return Err(TensorError::shape("matvec", format!("{:?} is not 2-D", self.shape())));
        }
        check_matvec(MatVec::rows(self), MatVec::cols(self), x.len(), out.len())?;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&w, &xv) in self.row(r).iter().zip(x) {
                acc += w * xv;
            }
            *o = acc;
        }
        Ok(())
    }
}

/// Dense matrix kept column-major so `M · x` runs as a sequence of axpys.
///
/// The per-output summation order (ascending column) is the same as the
/// row-dot form, so both produce identical results.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatVec<T> {
    rows: usize,
    cols: usize,
    by_column: Vec<T>,
}

impl<T: Scalar> DenseMatVec<T> {
    pub fn from_matrix(m: &Tensor<T>) -> Result<Self, TensorError> {
        let t = m.transpose()?;
        Ok(DenseMatVec { rows: m.shape()[0], cols: m.shape()[1], by_column: t.into_data() })
    }

    pub fn to_matrix(&self) -> Tensor<T> {
        let t = Tensor::new(vec![self.cols, self.rows], self.by_column.clone()).expect("consistent dims");
        t.transpose().expect("2-D")
    }
}

impl<T: Scalar> MatVec<T> for DenseMatVec<T> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn matvec_into(&self, x: &[T], out: &mut [T]) -> Result<(), TensorError> {
        check_matvec(self.rows, self.cols, x.len(), out.len())?;
        out.fill(T::zero());
        vec_mat_into(x, &self.by_column, self.rows, out);
        Ok(())
    }
}

/// One GRU update.
///
/// `w_ih: [in × 3h]` is applied as `x · w_ih`; `w_hh` is a `[3h × h]`
/// matrix applied as `w_hh · h`; `b: [3h]`. Gates are laid out as
/// (update, reset, candidate):
///
/// ```text
/// z  = σ(x·Wz + Uz·h + bz)
/// r  = σ(x·Wr + Ur·h + br)
/// n  = tanh(x·Wn + r ⊙ (Un·h) + bn)
/// h' = (1 − z) ⊙ h + z ⊙ n
/// ```
pub fn gru_cell<T: Scalar>(
    x: &[T],
    h: &[T],
    w_ih: &Tensor<T>,
    w_hh: &dyn MatVec<T>,
    b: &Tensor<T>,
) -> Result<Vec<T>, TensorError> {
    if w_ih.ndim() != 2 {
        return Err(TensorError::shape("gru_cell", format!("w_ih {:?} is not 2-D", w_ih.shape())));
    }
    gru_cell_with(x, h, &RowVectorProduct(w_ih), w_hh, b)
}

/// [`gru_cell`] with the input weight supplied as a `[3h × in]` provider,
/// so it can use any [`MatVec`] storage.
pub fn gru_cell_with<T: Scalar>(
    x: &[T],
    h: &[T],
    w_ih: &dyn MatVec<T>,
    w_hh: &dyn MatVec<T>,
    b: &Tensor<T>,
) -> Result<Vec<T>, TensorError> {
    let hd = h.len();
    if w_ih.cols() != x.len() || w_ih.rows() != 3 * hd {
        return Err(TensorError::shape(
            "gru_cell",
            format!("w_ih [{} x {}] for input {} and hidden {hd}", w_ih.cols(), w_ih.rows(), x.len()),
        ));
    }
    if w_hh.rows() != 3 * hd || w_hh.cols() != hd || b.len() != 3 * hd {
        return Err(TensorError::shape(
            "gru_cell",
            format!("w_hh [{} x {}], bias {} for hidden {hd}", w_hh.rows(), w_hh.cols(), b.len()),
        ));
    }
    let mut gi = vec![T::zero(); 3 * hd];
    w_ih.matvec_into(x, &mut gi)?;
    let mut gh = vec![T::zero(); 3 * hd];
    w_hh.matvec_into(h, &mut gh)?;
    let bias = b.data();
    let mut out = vec![T::zero(); hd];
    for i in 0..hd {
        let z = sigmoid(gi[i] + gh[i] + bias[i]);
        let r = sigmoid(gi[hd + i] + gh[hd + i] + bias[hd + i]);
        let n = (gi[2 * hd + i] + r * gh[2 * hd + i] + bias[2 * hd + i]).tanh();
        out[i] = (T::one() - z) * h[i] + z * n;
    }
    Ok(out)
}

/// `x · W` for a row-major `W: [in × out]`, seen as an `[out × in]` provider.
struct RowVectorProduct<'a, T>(&'a Tensor<T>);

impl<T: Scalar> MatVec<T> for RowVectorProduct<'_, T> {
    fn rows(&self) -> usize {
        self.0.shape()[1]
    }

    fn cols(&self) -> usize {
        self.0.shape()[0]
    }

    fn matvec_into(&self, x: &[T], out: &mut [T]) -> Result<(), TensorError> {
        check_matvec(self.rows(), self.cols(), x.len(), out.len())?;
        out.fill(T::zero());
        vec_mat_into(x, self.0.data(), self.rows(), out);
        Ok(())
    }
}
