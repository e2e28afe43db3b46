use crate::harness::instance::random_model as model;
use crate::harness::metrics::row_relative_errors;
use crate::reference::TransformerParams;
use crate::rng::{self, Purpose};
use crate::tensor::{MaskKind, Matrix};
use rand::Rng;

pub(crate) fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut g = rng::stream(seed, Purpose::Test, rows, cols);
    Matrix::from_fn(rows, cols, |_, _| g.random_range(-1.0..1.0))
}

pub(crate) fn random_model(
    n: usize,
    d: usize,
    h: usize,
    l: usize,
    mask: MaskKind,
    seed: u64,
) -> (Matrix, TransformerParams) {
    model(n, d, h, l, mask, seed).expect("valid test dimensions")
}

pub(crate) fn max_rel_error(got: &Matrix, want: &Matrix) -> f64 {
    row_relative_errors(got, want).into_iter().fold(0.0, f64::max)
}
