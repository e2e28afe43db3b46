//! Per-row error measures.

use crate::tensor::Matrix;

/// `|y_i - r_i| / |r_i|` per row, falling back to the absolute error when `r_i = 0`.
pub fn row_relative_errors(y: &Matrix, reference: &Matrix) -> Vec<f64> {
    assert_eq!(y.shape(), reference.shape(), "compared matrices must share a shape");
    (0..y.rows())
        .map(|i| {
            let diff: f64 = y.row(i).iter().zip(reference.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = reference.row_norm(i);
            if norm == 0.0 {
                diff
            } else {
                diff / norm
            }
        })
        .collect()
}

/// Euclidean distance per row.
pub fn row_abs_errors(y: &Matrix, reference: &Matrix) -> Vec<f64> {
    assert_eq!(y.shape(), reference.shape(), "compared matrices must share a shape");
    (0..y.rows())
        .map(|i| y.row(i).iter().zip(reference.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect()
}

pub fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
