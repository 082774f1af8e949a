use serde::{Deserialize, Serialize};

use crate::numerics::DenseMatrix;

/// Per-tensor symmetric int8 copy of a base weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBase {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scale: f64,
}

impl QuantizedBase {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn dequantize(&self) -> DenseMatrix {
        DenseMatrix::from_vec(
            self.rows,
            self.cols,
            self.values.iter().map(|&q| q as f64 * self.scale).collect(),
        )
        .expect("shape is consistent")
    }
}

/// Scale `max|W₀| / 127`; an all-zero tensor gets scale 1.
pub fn quantize_base(w0: &DenseMatrix) -> QuantizedBase {
    let max = w0.max_abs();
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let values = w0
        .data()
        .iter()
        .map(|&x| (x / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedBase {
        rows: w0.rows(),
        cols: w0.cols(),
        values,
        scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_gaussian, StreamKey, StreamRole};

    #[test]
    fn zero_matrix_round_trips_exactly() {
        let q = quantize_base(&DenseMatrix::zeros(3, 2));
        assert_eq!(q.scale(), 1.0);
        assert!(q.values().iter().all(|&v| v == 0));
        assert_eq!(q.dequantize(), DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn unit_magnitude_entries() {
        let w = DenseMatrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let q = quantize_base(&w);
        let back = q.dequantize();
        assert!(back.max_abs_diff(&w).unwrap() <= 1.0 / 127.0);
    }

    #[test]
    fn random_error_bounded_by_scale() {
        let w = sample_gaussian(StreamKey::new(4, 0, 1, StreamRole::Init), 8, 8).unwrap();
        let q = quantize_base(&w);
        let err = q.dequantize().max_abs_diff(&w).unwrap();
        assert!(err <= w.max_abs() / 127.0 + 1e-12, "error {err}");
    }
}
