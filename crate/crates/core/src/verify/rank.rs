use nalgebra::DMatrix;

use crate::numerics::DenseMatrix;

/// Singular values in decreasing order.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Vec::new();
    }
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut s: Vec<f64> = a
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// `σ_{r+1} / σ₁`; 0 for a zero matrix or when `r` reaches the smaller
/// dimension.
pub fn rank_check(delta: &DenseMatrix, r: usize) -> f64 {
    let s = singular_values(delta);
    match (s.first(), s.get(r)) {
        (Some(&s1), Some(&sr)) if s1 > 0.0 => sr / s1,
        _ => 0.0,
    }
}
