//! Block-sparse weights, the sparse matrix-vector kernel, and the
//! magnitude-pruning schedule that produces them.
//!
//! A matrix is cut into `block_rows × block_cols` tiles (16×1 by default).
//! Pruning ranks tiles by mean absolute value and drops the weakest ones;
//! the survivors are stored densely in row-major tile order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtype::Dtype;
use crate::scalar::Scalar;
use crate::tensor::{MatVec, Tensor, TensorError};

/// Fixed part of a serialized sparse matrix: kept count, block rows,
/// block cols, reserved (all `u32`).
pub const SPARSE_HEADER_BYTES: usize = 16;
/// One `u32` linear tile index per kept block.
pub const BLOCK_INDEX_BYTES: usize = 4;
pub const SCHEDULE_EXPONENT: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SparseError {
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockShape {
    pub rows: usize,
    pub cols: usize,
}

impl BlockShape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        BlockShape { rows, cols }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    fn grid(&self, rows: usize, cols: usize) -> Result<(usize, usize), SparseError> {
        if self.rows == 0 || self.cols == 0 || !rows.is_multiple_of(self.rows) || !cols.is_multiple_of(self.cols) {
            return Err(SparseError::Config(format!(
                "[{rows} x {cols}] is not divisible into {}x{} blocks",
                self.rows, self.cols
            )));
        }
        Ok((rows / self.rows, cols / self.cols))
    }
}

impl Default for BlockShape {
    fn default() -> Self {
        BlockShape::new(16, 1)
    }
}

/// Cubic sparsity ramp from `t_start` to `t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub t_start: u64,
    pub t_end: u64,
    pub s_final: f64,
}

impl PruneSchedule {
    pub fn new(t_start: u64, t_end: u64, s_final: f64) -> Result<Self, SparseError> {
        if t_start >= t_end {
            return Err(SparseError::Config(format!("t_start {t_start} must precede t_end {t_end}")));
        }
        if !(0.0..1.0).contains(&s_final) {
            return Err(SparseError::Argument(format!("final sparsity {s_final} outside [0, 1)")));
        }
        Ok(PruneSchedule { t_start, t_end, s_final })
    }

    pub fn sparsity_at(&self, t: u64) -> f64 {
        if t <= self.t_start {
            return 0.0;
        }
        if t >= self.t_end {
            return self.s_final;
        }
        let progress = (t - self.t_start) as f64 / (self.t_end - self.t_start) as f64;
        self.s_final * (1.0 - (1.0 - progress).powi(SCHEDULE_EXPONENT))
    }
}

/// Keep/drop flag per tile, row-major over the tile grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub block: BlockShape,
    keep: Vec<bool>,
}

impl BlockMask {
    pub fn new(grid_rows: usize, grid_cols: usize, block: BlockShape, keep: Vec<bool>) -> Result<Self, SparseError> {
        if keep.len() != grid_rows * grid_cols {
            return Err(SparseError::Argument(format!("{} flags for a {grid_rows}x{grid_cols} grid", keep.len())));
        }
        Ok(BlockMask { grid_rows, grid_cols, block, keep })
    }

    pub fn full(rows: usize, cols: usize, block: BlockShape, value: bool) -> Result<Self, SparseError> {
        let (gr, gc) = block.grid(rows, cols)?;
        Ok(BlockMask { grid_rows: gr, grid_cols: gc, block, keep: vec![value; gr * gc] })
    }

    pub fn n_blocks(&self) -> usize {
        self.keep.len()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_kept(&self, block_row: usize, block_col: usize) -> bool {
        self.keep[block_row * self.grid_cols + block_col]
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        1.0 - self.kept() as f64 / self.n_blocks() as f64
    }
}

/// Mean absolute value of every tile, row-major over the grid.
pub fn block_scores<T: Scalar>(w: &Tensor<T>, block: BlockShape) -> Result<Vec<f64>, SparseError> {
    if w.ndim() != 2 {
        return Err(SparseError::Shape(format!("{:?} is not 2-D", w.shape())));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let (gr, gc) = block.grid(rows, cols)?;
    let mut scores = vec![0.0f64; gr * gc];
    for r in 0..rows {
        let row = w.row(r);
        for (c, v) in row.iter().enumerate() {
            scores[(r / block.rows) * gc + c / block.cols] += v.to_f64_lossy().abs();
        }
    }
    let area = block.area() as f64;
    for s in &mut scores {
        *s /= area;
    }
    Ok(scores)
}

/// Zeroes the `⌊target · n_blocks⌋` lowest-scoring tiles.
///
/// Ties on score go to the lower (block_row, block_col) index first.
pub fn prune<T: Scalar>(w: &Tensor<T>, target: f64, block: BlockShape) -> Result<(BlockMask, Tensor<T>), SparseError> {
    if !(0.0..1.0).contains(&target) {
        return Err(SparseError::Argument(format!("target sparsity {target} outside [0, 1)")));
    }
    let scores = block_scores(w, block)?;
    let (gr, gc) = block.grid(w.shape()[0], w.shape()[1])?;
    let n_blocks = gr * gc;
    let n_prune = (target * n_blocks as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n_blocks).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut keep = vec![true; n_blocks];
    for &idx in &order[..n_prune] {
        keep[idx] = false;
    }
    let mask = BlockMask::new(gr, gc, block, keep)?;
    let masked = apply_mask(w, &mask)?;
    Ok((mask, masked))
}

/// Zeroes every dropped tile of `w`.
pub fn apply_mask<T: Scalar>(w: &Tensor<T>, mask: &BlockMask) -> Result<Tensor<T>, SparseError> {
    check_mask(w, mask)?;
    let mut out = w.clone();
    let cols = w.shape()[1];
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            if !mask.is_kept(r / mask.block.rows, c / mask.block.cols) {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

fn check_mask<T: Scalar>(w: &Tensor<T>, mask: &BlockMask) -> Result<(), SparseError> {
    if w.ndim() != 2 {
        return Err(SparseError::Shape(format!("{:?} is not 2-D", w.shape())));
    }
    let (gr, gc) = mask.block.grid(w.shape()[0], w.shape()[1])?;
    if gr != mask.grid_rows || gc != mask.grid_cols {
        return Err(SparseError::Argument(format!(
            "mask grid {}x{} does not fit {:?} with {}x{} blocks",
            mask.grid_rows,
            mask.grid_cols,
            w.shape(),
            mask.block.rows,
            mask.block.cols
        )));
    }
    Ok(())
}

/// Compressed block-sparse matrix; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseMatrix<T> {
    rows: usize,
    cols: usize,
    block: BlockShape,
    kept_blocks: Vec<(u32, u32)>,
    block_data: Vec<T>,
}

impl<T: Scalar> BlockSparseMatrix<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        block: BlockShape,
        kept_blocks: Vec<(u32, u32)>,
        block_data: Vec<T>,
    ) -> Result<Self, SparseError> {
        let (gr, gc) = block.grid(rows, cols)?;
        if kept_blocks.windows(2).any(|p| p[0] >= p[1]) {
            return Err(SparseError::Argument("kept blocks must be strictly sorted".into()));
        }
        if kept_blocks.iter().any(|&(r, c)| r as usize >= gr || c as usize >= gc) {
            return Err(SparseError::Argument("kept block outside the grid".into()));
        }
        if block_data.len() != kept_blocks.len() * block.area() {
            return Err(SparseError::Shape(format!(
                "{} values for {} blocks of {}",
                block_data.len(),
                kept_blocks.len(),
                block.area()
            )));
        }
        Ok(BlockSparseMatrix { rows, cols, block, kept_blocks, block_data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block(&self) -> BlockShape {
        self.block
    }

    pub fn kept_blocks(&self) -> &[(u32, u32)] {
        &self.kept_blocks
    }

    pub fn block_data(&self) -> &[T] {
        &self.block_data
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows / self.block.rows, self.cols / self.block.cols)
    }

    pub fn n_blocks(&self) -> usize {
        let (gr, gc) = self.grid();
        gr * gc
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_blocks.len() as f64 / self.n_blocks() as f64
    }

    pub fn mask(&self) -> BlockMask {
        let (gr, gc) = self.grid();
        let mut keep = vec![false; gr * gc];
        for &(r, c) in &self.kept_blocks {
            keep[r as usize * gc + c as usize] = true;
        }
        BlockMask::new(gr, gc, self.block, keep).expect("grid-sized")
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        BlockSparseMatrix { block_data: self.block_data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn densify(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(vec![self.rows, self.cols]);
        let (br, bc) = (self.block.rows, self.block.cols);
        let data = out.data_mut();
        for (values, &(gr, gc)) in self.block_data.chunks(self.block.area()).zip(&self.kept_blocks) {
            for r in 0..br {
                let row = gr as usize * br + r;
                let start = row * self.cols + gc as usize * bc;
                data[start..start + bc].copy_from_slice(&values[r * bc..(r + 1) * bc]);
            }
        }
        out
    }
}

pub fn to_block_sparse<T: Scalar>(w_masked: &Tensor<T>, mask: &BlockMask) -> Result<BlockSparseMatrix<T>, SparseError> {
    check_mask(w_masked, mask)?;
    let (rows, cols) = (w_masked.shape()[0], w_masked.shape()[1]);
    let (br, bc) = (mask.block.rows, mask.block.cols);
    let mut kept = Vec::with_capacity(mask.kept());
    let mut values = Vec::with_capacity(mask.kept() * mask.block.area());
    for gr in 0..mask.grid_rows {
        for gc in 0..mask.grid_cols {
            if !mask.is_kept(gr, gc) {
                continue;
            }
            kept.push((gr as u32, gc as u32));
            for r in 0..br {
                let start = (gr * br + r) * cols + gc * bc;
                values.extend_from_slice(&w_masked.data()[start..start + bc]);
            }
        }
    }
    BlockSparseMatrix::new(rows, cols, mask.block, kept, values)
}

impl<T: Scalar> MatVec<T> for BlockSparseMatrix<T> {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    /// Visits kept tiles only. Per output row, contributions arrive in
    /// ascending column order, matching the dense kernels.
    fn matvec_into(&self, x: &[T], out: &mut [T]) -> Result<(), TensorError> {
        if x.len() != self.cols || out.len() != self.rows {
            return Err(TensorError::shape(
                "sparse_matvec",
                format!("[{} x {}] with x of {} and out of {}", self.rows, self.cols, x.len(), out.len()),
            ));
        }
        out.fill(T::zero());
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { self.accumulate_avx2(x, out) };
            return Ok(());
        }
        self.accumulate(x, out);
        Ok(())
    }
}

impl<T: Scalar> BlockSparseMatrix<T> {
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_avx2(&self, x: &[T], out: &mut [T]) {
        self.accumulate(x, out);
    }

    #[inline(always)]
    fn accumulate(&self, x: &[T], out: &mut [T]) {
        let (br, bc) = (self.block.rows, self.block.cols);
        let area = self.block.area();
        if bc == 1 && br == 16 {
            self.accumulate_column_tiles::<16>(x, out);
        } else if bc == 1 {
            for (values, &(gr, gc)) in self.block_data.chunks_exact(area).zip(&self.kept_blocks) {
                let xv = x[gc as usize];
                let base = gr as usize * br;
                for (o, &w) in out[base..base + br].iter_mut().zip(values) {
                    *o += w * xv;
                }
            }
        } else {
            for (values, &(gr, gc)) in self.block_data.chunks_exact(area).zip(&self.kept_blocks) {
                let xs = &x[gc as usize * bc..(gc as usize + 1) * bc];
                for r in 0..br {
                    let o = &mut out[gr as usize * br + r];
                    for (&w, &xv) in values[r * bc..(r + 1) * bc].iter().zip(xs) {
                        *o += w * xv;
                    }
                }
            }
        }
    }

    /// `R×1` tiles: a block row's partial sums stay in registers while its
    /// tiles are visited in ascending column order.
    #[inline(always)]
    fn accumulate_column_tiles<const R: usize>(&self, x: &[T], out: &mut [T]) {
        let kept = &self.kept_blocks;
        let mut i = 0;
        while i < kept.len() {
            let gr = kept[i].0;
            let base = gr as usize * R;
            let mut acc = [T::zero(); R];
            while i < kept.len() && kept[i].0 == gr {
                let xv = x[kept[i].1 as usize];
                let values: &[T; R] = self.block_data[i * R..(i + 1) * R].try_into().expect("tile of R values");
                for r in 0..R {
                    acc[r] += values[r] * xv;
                }
                i += 1;
            }
            out[base..base + R].copy_from_slice(&acc);
        }
    }
}

pub fn sparse_matvec<T: Scalar>(m: &BlockSparseMatrix<T>, x: &Tensor<T>) -> Result<Tensor<T>, SparseError> {
    let mut out = vec![T::zero(); m.rows];
    m.matvec_into(x.data(), &mut out).map_err(|e| SparseError::Shape(e.to_string()))?;
    Ok(Tensor::vector(out))
}

/// Serialized size: header, one index per kept tile, and tile values.
pub fn sparse_footprint_bytes<T: Scalar>(m: &BlockSparseMatrix<T>, dtype: Dtype) -> usize {
    SPARSE_HEADER_BYTES + m.kept_blocks.len() * (BLOCK_INDEX_BYTES + m.block.area() * dtype.width())
}
