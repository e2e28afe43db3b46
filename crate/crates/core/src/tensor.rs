//! Dense row-major matrices and the handful of kernels everything else is built on.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{restriction, shape, Error, Result};

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input, so keep it to literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_values(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Rows `range`, in order.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row range out of bounds");
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.cols, "column range out of bounds");
        Matrix::from_fn(self.rows, range.len(), |i, j| self[(i, range.start + j)])
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, indices.len(), |i, j| self[(i, indices[j])])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Euclidean norm of row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Which key positions a query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Dense,
    Causal,
    /// Each query sees its `r` most recent positions, itself included.
    Window {
        r: usize,
    },
    /// The first `s` positions plus the `r`-window, both restricted to the causal region.
    Sink {
        s: usize,
        r: usize,
    },
}

impl MaskKind {
    pub fn validate(self) -> Result<()> {
        match self {
            MaskKind::Window { r: 0 } | MaskKind::Sink { r: 0, .. } => {
                Err(Error::Config("window width r must be at least 1".into()))
            }
            MaskKind::Sink { s: 0, .. } => Err(Error::Config("sink size s must be at least 1".into())),
            _ => Ok(()),
        }
    }

    /// Whether query `i` may attend to key `j` (0-based).
    pub fn visible(self, i: usize, j: usize) -> bool {
        match self {
            MaskKind::Dense => true,
            MaskKind::Causal => j <= i,
            MaskKind::Window { r } => j <= i && i - j < r,
            MaskKind::Sink { s, r } => j <= i && (j < s || i - j < r),
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape(format!("cannot multiply {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    ensure_finite(out, "matmul")
}

/// Row-wise softmax over the entries `mask` leaves visible; masked entries get weight 0.
///
/// Each row is shifted by its visible maximum before exponentiation.
pub fn masked_row_softmax(scores: &Matrix, mask: MaskKind) -> Result<Matrix> {
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let row = scores.row(i);
        let max = (0..scores.cols).filter(|&j| mask.visible(i, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(shape(format!("row {i} is fully masked")));
        }
        let out_row = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..scores.cols {
            if mask.visible(i, j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= total;
        }
    }
    ensure_finite(out, "softmax")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

pub fn concat(parts: &[&Matrix], axis: Axis) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(shape("nothing to concatenate"));
    };
    match axis {
        Axis::Rows => {
            let cols = first.cols;
            if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
                return Err(shape(format!("row stack needs {cols} columns, got {}", bad.cols)));
            }
            let rows = parts.iter().map(|p| p.rows).sum();
            let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
            Ok(Matrix { rows, cols, data })
        }
        Axis::Cols => {
            let rows = first.rows;
            if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
                return Err(shape(format!("column stack needs {rows} rows, got {}", bad.rows)));
            }
            let cols = parts.iter().map(|p| p.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Ok(Matrix { rows, cols, data })
        }
    }
}

/// One constant-padding edit: a new row or column inserted before index `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Pad {
    Row { at: usize, values: Vec<f64> },
    Col { at: usize, values: Vec<f64> },
}

impl Pad {
    pub fn len(&self) -> usize {
        match self {
            Pad::Row { values, .. } | Pad::Col { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inserts constant rows/columns. The total number of constants must fit `budget`.
pub fn pad_constants(m: &Matrix, edits: &[Pad], budget: usize) -> Result<Matrix> {
    let used: usize = edits.iter().map(Pad::len).sum();
    if used > budget {
        return Err(restriction(format!("padding {used} constants exceeds the budget of {budget}")));
    }
    let mut out = m.clone();
    for edit in edits {
        out = match edit {
            Pad::Row { at, values } => {
                if values.len() != out.cols || *at > out.rows {
                    return Err(shape(format!(
                        "row pad of {} values at {at} does not fit {}x{}",
                        values.len(),
                        out.rows,
                        out.cols
                    )));
                }
                let mut data = out.data[..at * out.cols].to_vec();
                data.extend_from_slice(values);
                data.extend_from_slice(&out.data[at * out.cols..]);
                Matrix { rows: out.rows + 1, cols: out.cols, data }
            }
            Pad::Col { at, values } => {
                if values.len() != out.rows || *at > out.cols {
                    return Err(shape(format!(
                        "column pad of {} values at {at} does not fit {}x{}",
                        values.len(),
                        out.rows,
                        out.cols
                    )));
                }
                Matrix::from_fn(out.rows, out.cols + 1, |i, j| match j.cmp(at) {
                    std::cmp::Ordering::Less => out[(i, j)],
                    std::cmp::Ordering::Equal => values[i],
                    std::cmp::Ordering::Greater => out[(i, j - 1)],
                })
            }
        };
    }
    ensure_finite(out, "padding")
}

pub(crate) fn ensure_finite(m: Matrix, what: &str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Degenerate(format!("{what} produced a non-finite entry")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[(i, j)] += a[(i, k)] * b[(k, j)];
                }
            }
        }
        out
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn mismatched_product_is_a_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let p = masked_row_softmax(&Matrix::from_rows(&[[0.0, 0.0]]), MaskKind::Dense).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[0.5, 0.5]]));
    }

    #[test]
    fn causal_softmax_hides_the_future() {
        let s = Matrix::from_rows(&[[0.0, 5.0], [0.0, 0.0]]);
        let p = masked_row_softmax(&s, MaskKind::Causal).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]));
    }

    #[test]
    fn window_softmax_matches_negative_infinity_substitution() {
        let s = Matrix::from_rows(&[
            [0.3, -1.2, 0.7, 2.0],
            [1.1, 0.4, -0.3, 0.9],
            [-0.6, 0.8, 1.5, -2.2],
            [0.05, -0.7, 0.2, 1.3],
        ]);
        let mask = MaskKind::Window { r: 2 };
        let got = masked_row_softmax(&s, mask).unwrap();
        for i in 0..4 {
            let subst: Vec<f64> =
                (0..4).map(|j| if j <= i && i - j < 2 { s[(i, j)] } else { f64::NEG_INFINITY }).collect();
            let total: f64 = subst.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                assert!((got[(i, j)] - subst[j].exp() / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let err = masked_row_softmax(&Matrix::zeros(1, 0), MaskKind::Dense).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn sink_mask_keeps_first_positions() {
        let mask = MaskKind::Sink { s: 2, r: 2 };
        let visible: Vec<usize> = (0..8).filter(|&j| mask.visible(6, j)).collect();
        assert_eq!(visible, vec![0, 1, 5, 6]);
    }

    #[test]
    fn concat_single_part_is_identity() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(concat(&[&a], Axis::Rows).unwrap(), a);
    }

    #[test]
    fn concat_two_rows() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(concat(&[&a, &b], Axis::Rows).unwrap(), Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    }

    #[test]
    fn concat_of_column_slices_restores_the_matrix() {
        let x = Matrix::from_fn(3, 6, |i, j| (i * 6 + j) as f64);
        let parts: Vec<Matrix> = (0..3).map(|h| x.slice_cols(2 * h..2 * h + 2)).collect();
        let refs: Vec<&Matrix> = parts.iter().collect();
        assert_eq!(concat(&refs, Axis::Cols).unwrap(), x);
    }

    #[test]
    fn pad_ones_column() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let p = pad_constants(&a, &[Pad::Col { at: 2, values: vec![1.0, 1.0] }], 4).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[1.0, 2.0, 1.0], [3.0, 4.0, 1.0]]));
    }

    #[test]
    fn pad_synthetic_bottom_row() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 1.0], [3.0, 4.0, 1.0]]);
        let p = pad_constants(&a, &[Pad::Row { at: 2, values: vec![0.0, 0.0, 1.0] }], 9).unwrap();
        assert_eq!(p.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pad_over_budget_is_a_restriction_error() {
        let a = Matrix::zeros(4, 1);
        let edits = [Pad::Col { at: 1, values: vec![1.0; 4] }, Pad::Row { at: 0, values: vec![0.0, 0.0] }];
        // d = 2, so the budget is d^2 = 4 and five constants are one too many.
        let err = pad_constants(&a, &edits, 4).unwrap_err();
        assert!(matches!(err, Error::Restriction(_)));
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(a in arb_matrix(3, 4), b in arb_matrix(4, 2)) {
            let got = matmul(&a, &b).unwrap();
            prop_assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
        }

        #[test]
        fn matmul_is_associative(a in arb_matrix(3, 4), b in arb_matrix(4, 2), c in arb_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-10 * scale);
        }

        #[test]
        fn softmax_rows_are_distributions(s in arb_matrix(5, 5), r in 1usize..6) {
            for mask in [MaskKind::Dense, MaskKind::Causal, MaskKind::Window { r }, MaskKind::Sink { s: 1, r }] {
                let p = masked_row_softmax(&s, mask).unwrap();
                for i in 0..5 {
                    let total: f64 = p.row(i).iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
                    for j in 0..5 {
                        if !mask.visible(i, j) {
                            prop_assert_eq!(p[(i, j)], 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn stabilized_softmax_matches_raw_formula(s in arb_matrix(4, 6)) {
            let p = masked_row_softmax(&s, MaskKind::Dense).unwrap();
            for i in 0..4 {
                let total: f64 = s.row(i).iter().map(|v| v.exp()).sum();
                for j in 0..6 {
                    let raw = s[(i, j)].exp() / total;
                    prop_assert!((p[(i, j)] - raw).abs() <= 1e-12 * raw.max(1e-300));
                }
            }
        }

        #[test]
        fn padding_then_selecting_recovers_input(a in arb_matrix(3, 2), c in -3.0f64..3.0) {
            let padded = pad_constants(
                &a,
                &[Pad::Row { at: 0, values: vec![c, c] }, Pad::Col { at: 2, values: vec![c; 4] }],
                16,
            )
            .unwrap();
            prop_assert_eq!(padded.slice_rows(1..4).slice_cols(0..2), a);
        }
    }
}
