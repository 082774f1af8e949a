use serde::{Deserialize, Serialize};

use crate::error::{Result, ZoError};
use crate::numerics::{add_scaled_product_unchecked, check_factors, DenseMatrix, WriteCounter};

/// One low-rank block contributing `scale · A Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSlot {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub scale: f64,
}

impl LoraSlot {
    pub fn new(a: DenseMatrix, b: DenseMatrix, scale: f64) -> Result<Self> {
        check_factors(&a, &b)?;
        if a.cols() == 0 {
            return Err(ZoError::dim("slot rank must be at least 1"));
        }
        Ok(Self { a, b, scale })
    }

    /// Rank-0 slot with zero contribution.
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            a: DenseMatrix::zeros(rows, 0),
            b: DenseMatrix::zeros(cols, 0),
            scale: 1.0,
        }
    }

    /// Zero-contribution accumulator whose right factor is `b`.
    pub fn accumulator(rows: usize, b: DenseMatrix) -> Self {
        let k = b.cols();
        Self {
            a: DenseMatrix::zeros(rows, k),
            b,
            scale: 1.0,
        }
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn cols(&self) -> usize {
        self.b.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn dense(&self) -> DenseMatrix {
        let mut w = DenseMatrix::zeros(self.rows(), self.cols());
        add_scaled_product_unchecked(&mut w, 0, self.scale, &self.a, &self.b);
        w
    }

    /// Adds `multiplier · scale · A Bᵀ` into the block of `w` at `col_offset`.
    /// Scratch-buffer operation: no write accounting.
    pub(crate) fn add_into(&self, w: &mut DenseMatrix, col_offset: usize, multiplier: f64) {
        add_scaled_product_unchecked(w, col_offset, multiplier * self.scale, &self.a, &self.b);
    }

    /// `A ← A − eta · c · G`. Records `m·k` writes.
    pub fn accumulate_on_u(
        &mut self,
        eta: f64,
        c: f64,
        g: &DenseMatrix,
        counter: &mut WriteCounter,
    ) -> Result<()> {
        if g.shape() != self.a.shape() {
            return Err(ZoError::dim(format!(
                "direction {:?} does not match left factor {:?}",
                g.shape(),
                self.a.shape()
            )));
        }
        let coef = eta * c;
        for (a, x) in self.a.data_mut().iter_mut().zip(g.data()) {
            *a -= coef * x;
        }
        counter.record(self.a.rows() * self.a.cols());
        Ok(())
    }

    /// Folds `scale · A Bᵀ` into the block of `target` at `col_offset` in one
    /// `m·n` write burst, then drops the accumulator so the slot contributes
    /// zero. The right factor is kept.
    pub fn fold_into(
        &mut self,
        target: &mut DenseMatrix,
        col_offset: usize,
        counter: &mut WriteCounter,
    ) -> Result<()> {
        target.check_block(col_offset, self.rows(), self.cols())?;
        add_scaled_product_unchecked(target, col_offset, self.scale, &self.a, &self.b);
        counter.record(self.rows() * self.cols());
        self.reset();
        Ok(())
    }

    pub fn reset(&mut self) {
        self.a = DenseMatrix::zeros(self.a.rows(), self.a.cols());
    }

    pub fn negated(&self) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            scale: -self.scale,
        }
    }
}

/// Folds a window slot into a dense target (see [`LoraSlot::fold_into`]).
pub fn fold_window(
    slot: &mut LoraSlot,
    target: &mut DenseMatrix,
    counter: &mut WriteCounter,
) -> Result<()> {
    slot.fold_into(target, 0, counter)
}

/// Folds several slots that live in disjoint column blocks of one packed
/// matrix, visiting each touched element exactly once.
///
/// `blocks` holds `(col_offset, slot)` pairs. Per-element arithmetic is the
/// same as folding each block separately.
pub fn fold_packed(
    target: &mut DenseMatrix,
    blocks: &mut [(usize, &mut LoraSlot)],
    counter: &mut WriteCounter,
) -> Result<()> {
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(blocks.len());
    for (off, slot) in blocks.iter() {
        target.check_block(*off, slot.rows(), slot.cols())?;
        spans.push((*off, *off + slot.cols()));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(ZoError::dim("packed blocks overlap"));
    }
    let cols = target.cols();
    let data = target.data_mut();
    for i in 0..blocks[0].1.rows() {
        let row = &mut data[i * cols..(i + 1) * cols];
        for (off, slot) in blocks.iter() {
            let arow = slot.a.row(i);
            for j in 0..slot.cols() {
                let s = crate::numerics::canonical_dot(arow, slot.b.row(j));
                row[off + j] += slot.scale * s;
            }
        }
    }
    let touched: usize = blocks.iter().map(|(_, s)| s.rows() * s.cols()).sum();
    counter.record(touched);
    for (_, slot) in blocks.iter_mut() {
        slot.reset();
    }
    Ok(())
}

/// Concatenates slots into one with `A = [s₁A₁ … sₖAₖ]`, `B = [B₁ … Bₖ]`
/// and unit scale. An empty list yields the rank-0 slot.
pub fn merge_slots(rows: usize, cols: usize, slots: &[LoraSlot]) -> Result<LoraSlot> {
    if slots.is_empty() {
        return Ok(LoraSlot::empty(rows, cols));
    }
    for s in slots {
        if s.rows() != rows || s.cols() != cols {
            return Err(ZoError::dim(format!(
                "slot {}x{} cannot merge into {rows}x{cols}",
                s.rows(),
                s.cols()
            )));
        }
    }
    let scaled: Vec<DenseMatrix> = slots.iter().map(|s| s.a.scaled(s.scale)).collect();
    let a = DenseMatrix::hcat(rows, &scaled.iter().collect::<Vec<_>>())?;
    let b = DenseMatrix::hcat(cols, &slots.iter().map(|s| &s.b).collect::<Vec<_>>())?;
    Ok(LoraSlot { a, b, scale: 1.0 })
}
