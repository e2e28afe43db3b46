//! The closed catalog of MLP primitives.
//!
//! Steps act on a whole matrix so that index-aware steps (`PadIndicator`, `Reverse`,
//! `LookupShift`) can see each token's position. Every other step is row-local.
//! Nothing in the catalog evaluates a transcendental function.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{degenerate, restriction, shape, Result};
use crate::tensor::{matmul, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MlpStep {
    /// `row * weight + bias`.
    Affine { weight: Matrix, bias: Vec<f64> },
    /// Output column `k` is input column `indices[k]`.
    SelectCols(Vec<usize>),
    /// Appends the same constants to every row.
    PadConst(Vec<f64>),
    /// Appends a column holding 1 for token positions in `rows` and 0 elsewhere.
    PadIndicator { rows: Range<usize> },
    /// Replaces `x` in column `col` by `scale * x / (1 - x)`.
    RatioRecover { col: usize, scale: f64 },
    /// Multiplies columns `cols` by the value in column `by`.
    ScaleCols { cols: Range<usize>, by: usize },
    /// Divides columns `cols` by the value in column `by`.
    DivideCols { cols: Range<usize>, by: usize },
    /// Input `[a_1..a_K | r_1 .. r_K]` with each `r_k` of `width` columns;
    /// output `sum_k s_k a_k r_k / sum_k s_k a_k`.
    WeightedRatio { signs: Vec<f64>, width: usize },
    /// Reverses token order within columns `cols`.
    Reverse { cols: Range<usize> },
    /// Token `i` of columns `cols` takes the value of token `source[i]`, or zeros for `None`.
    LookupShift { cols: Range<usize>, source: Vec<Option<usize>> },
    /// Splits the columns into consecutive blocks of the given widths, applies one spec
    /// per block, and concatenates the results.
    Blocks(Vec<(usize, MlpSpec)>),
}

/// A composition of catalog steps; the empty spec is the identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub steps: Vec<MlpStep>,
}

impl MlpSpec {
    pub fn identity() -> Self {
        MlpSpec::default()
    }

    pub fn new(steps: Vec<MlpStep>) -> Self {
        MlpSpec { steps }
    }

    pub fn then(mut self, step: MlpStep) -> Self {
        self.steps.push(step);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    /// Output width for an input of `in_width` columns, validating every index.
    pub fn output_width(&self, in_width: usize) -> Result<usize> {
        self.steps.iter().try_fold(in_width, |w, step| step.output_width(w))
    }

    /// Arithmetic operations per token for an input of `in_width` columns.
    pub fn cost_per_token(&self, in_width: usize) -> Result<usize> {
        let mut w = in_width;
        let mut cost = 0;
        for step in &self.steps {
            cost += step.cost()?;
            w = step.output_width(w)?;
        }
        Ok(cost)
    }

    /// Applies every step without a budget check.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.clone();
        for step in &self.steps {
            out = step.apply(&out)?;
        }
        Ok(out)
    }
}

/// Applies `spec` token-wise after checking its per-token cost against `budget`.
pub fn mlp_apply(spec: &MlpSpec, x: &Matrix, budget: usize) -> Result<Matrix> {
    let cost = spec.cost_per_token(x.cols())?;
    if cost > budget {
        return Err(restriction(format!("MLP needs {cost} operations per token, budget is {budget}")));
    }
    spec.apply(x)
}

fn check_cols(cols: &Range<usize>, width: usize) -> Result<()> {
    if cols.start > cols.end || cols.end > width {
        return Err(shape(format!("column range {cols:?} outside width {width}")));
    }
    Ok(())
}

fn check_col(col: usize, width: usize) -> Result<()> {
    if col >= width {
        return Err(shape(format!("column {col} outside width {width}")));
    }
    Ok(())
}

impl MlpStep {
    fn output_width(&self, w: usize) -> Result<usize> {
        match self {
            MlpStep::Affine { weight, bias } => {
                if weight.rows() != w || bias.len() != weight.cols() {
                    return Err(shape(format!(
                        "affine step {}x{} with bias {} cannot take width {w}",
                        weight.rows(),
                        weight.cols(),
                        bias.len()
                    )));
                }
                Ok(weight.cols())
            }
            MlpStep::SelectCols(indices) => {
                if let Some(&bad) = indices.iter().find(|&&i| i >= w) {
                    return Err(shape(format!("selected column {bad} outside width {w}")));
                }
                Ok(indices.len())
            }
            MlpStep::PadConst(values) => Ok(w + values.len()),
            MlpStep::PadIndicator { .. } => Ok(w + 1),
            MlpStep::RatioRecover { col, .. } => check_col(*col, w).map(|_| w),
            MlpStep::ScaleCols { cols, by } | MlpStep::DivideCols { cols, by } => {
                check_cols(cols, w)?;
                check_col(*by, w)?;
                if cols.contains(by) {
                    return Err(shape("a column cannot scale itself"));
                }
                Ok(w)
            }
            MlpStep::WeightedRatio { signs, width } => {
                let parts = signs.len();
                if parts == 0 || w != parts * (1 + width) {
                    return Err(shape(format!(
                        "weighted ratio over {parts} parts of width {width} cannot take width {w}"
                    )));
                }
                Ok(*width)
            }
            MlpStep::Reverse { cols } | MlpStep::LookupShift { cols, .. } => check_cols(cols, w).map(|_| w),
            MlpStep::Blocks(blocks) => {
                let total: usize = blocks.iter().map(|(bw, _)| bw).sum();
                if total != w {
                    return Err(shape(format!("blocks cover {total} columns of {w}")));
                }
                blocks.iter().map(|(bw, spec)| spec.output_width(*bw)).sum()
            }
        }
    }

    fn cost(&self) -> Result<usize> {
        Ok(match self {
            MlpStep::Affine { weight, .. } => weight.rows() * weight.cols() + weight.cols(),
            MlpStep::SelectCols(indices) => indices.len(),
            MlpStep::PadConst(values) => values.len(),
            MlpStep::PadIndicator { .. } => 1,
            MlpStep::RatioRecover { .. } => 3,
            MlpStep::ScaleCols { cols, .. } | MlpStep::DivideCols { cols, .. } => cols.len(),
            MlpStep::WeightedRatio { signs, width } => signs.len() * (2 * width + 2) + width,
            MlpStep::Reverse { cols } | MlpStep::LookupShift { cols, .. } => cols.len(),
            MlpStep::Blocks(blocks) => {
                let mut total = 0;
                for (bw, spec) in blocks {
                    total += spec.cost_per_token(*bw)?;
                }
                total
            }
        })
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let w = x.cols();
        let out_w = self.output_width(w)?;
        let n = x.rows();
        match self {
            MlpStep::Affine { weight, bias } => {
                let mut out = matmul(x, weight)?;
                for i in 0..n {
                    for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                        *o += b;
                    }
                }
                Ok(out)
            }
            MlpStep::SelectCols(indices) => Ok(x.select_cols(indices)),
            MlpStep::PadConst(values) => {
                Ok(Matrix::from_fn(n, out_w, |i, j| if j < w { x[(i, j)] } else { values[j - w] }))
            }
            MlpStep::PadIndicator { rows } => Ok(Matrix::from_fn(n, out_w, |i, j| {
                if j < w {
                    x[(i, j)]
                } else if rows.contains(&i) {
                    1.0
                } else {
                    0.0
                }
            })),
            MlpStep::RatioRecover { col, scale } => {
                let mut out = x.clone();
                for i in 0..n {
                    let v = x[(i, *col)];
                    if v >= 1.0 {
                        return Err(degenerate(format!(
                            "ratio {v} at token {i} leaves no room for the synthetic token"
                        )));
                    }
                    out[(i, *col)] = scale * v / (1.0 - v);
                }
                Ok(out)
            }
            MlpStep::ScaleCols { cols, by } => {
                let mut out = x.clone();
                for i in 0..n {
                    let f = x[(i, *by)];
                    for j in cols.clone() {
                        out[(i, j)] *= f;
                    }
                }
                Ok(out)
            }
            MlpStep::DivideCols { cols, by } => {
                let mut out = x.clone();
                for i in 0..n {
                    let f = x[(i, *by)];
                    if f == 0.0 {
                        return Err(degenerate(format!("division by zero at token {i}")));
                    }
                    for j in cols.clone() {
                        out[(i, j)] /= f;
                    }
                }
                Ok(out)
            }
            MlpStep::WeightedRatio { signs, width } => {
                let parts = signs.len();
                let mut out = Matrix::zeros(n, *width);
                for i in 0..n {
                    let row = x.row(i);
                    let den: f64 = signs.iter().zip(row).map(|(s, a)| s * a).sum();
                    if den.is_nan() || den <= 0.0 {
                        return Err(degenerate(format!("recombined normalizer {den} at token {i} is not positive")));
                    }
                    let out_row = out.row_mut(i);
                    for k in 0..parts {
                        let weight = signs[k] * row[k];
                        let ratio = &row[parts + k * width..parts + (k + 1) * width];
                        for (o, r) in out_row.iter_mut().zip(ratio) {
                            *o += weight * r;
                        }
                    }
                    for o in out_row.iter_mut() {
                        *o /= den;
                    }
                }
                Ok(out)
            }
            MlpStep::Reverse { cols } => {
                let mut out = x.clone();
                for i in 0..n {
                    for j in cols.clone() {
                        out[(i, j)] = x[(n - 1 - i, j)];
                    }
                }
                Ok(out)
            }
            MlpStep::LookupShift { cols, source } => {
                if source.len() != n {
                    return Err(shape(format!("lookup table has {} entries for {n} tokens", source.len())));
                }
                let mut out = x.clone();
                for (i, src) in source.iter().enumerate() {
                    for j in cols.clone() {
                        out[(i, j)] = match src {
                            Some(s) if *s < n => x[(*s, j)],
                            Some(s) => return Err(shape(format!("lookup source {s} outside {n} tokens"))),
                            None => 0.0,
                        };
                    }
                }
                Ok(out)
            }
            MlpStep::Blocks(blocks) => {
                let mut start = 0;
                let mut pieces = Vec::with_capacity(blocks.len());
                for (bw, spec) in blocks {
                    pieces.push(spec.apply(&x.slice_cols(start..start + bw))?);
                    start += bw;
                }
                let mut out = Matrix::zeros(n, out_w);
                for i in 0..n {
                    let mut j = 0;
                    for p in &pieces {
                        out.row_mut(i)[j..j + p.cols()].copy_from_slice(p.row(i));
                        j += p.cols();
                    }
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn identity_spec_returns_input() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        assert_eq!(mlp_apply(&MlpSpec::identity(), &x, 0).unwrap(), x);
    }

    #[test]
    fn ratio_recover_inverts_a_over_a_plus_one() {
        let spec = MlpSpec::new(vec![MlpStep::RatioRecover { col: 0, scale: 1.0 }]);
        let out = spec.apply(&Matrix::column(&[0.75])).unwrap();
        assert_eq!(out[(0, 0)], 3.0);
    }

    #[test]
    fn ratio_of_one_is_degenerate() {
        let spec = MlpSpec::new(vec![MlpStep::RatioRecover { col: 0, scale: 1.0 }]);
        assert!(matches!(spec.apply(&Matrix::column(&[1.0])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reverse_flips_token_order() {
        let x = Matrix::column(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let spec = MlpSpec::new(vec![MlpStep::Reverse { cols: 0..1 }]);
        assert_eq!(spec.apply(&x).unwrap(), Matrix::column(&[5.0, 4.0, 3.0, 2.0, 1.0]));
    }

    #[test]
    fn lookup_shift_fills_missing_sources_with_zeros() {
        let x = Matrix::from_rows(&[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]);
        let spec = MlpSpec::new(vec![MlpStep::LookupShift { cols: 1..2, source: vec![Some(1), Some(2), None] }]);
        assert_eq!(spec.apply(&x).unwrap(), Matrix::from_rows(&[[1.0, 20.0], [2.0, 30.0], [3.0, 0.0]]));
    }

    #[test]
    fn indicator_marks_positions() {
        let spec = MlpSpec::new(vec![MlpStep::PadIndicator { rows: 1..3 }]);
        let out = spec.apply(&Matrix::zeros(4, 1)).unwrap();
        assert_eq!(out.col_values(1), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn weighted_ratio_recombines_blocks() {
        // Two parts: A = (1, 3), ratios (2) and (6): (1*2 + 3*6) / 4 = 5.
        let spec = MlpSpec::new(vec![MlpStep::WeightedRatio { signs: vec![1.0, 1.0], width: 1 }]);
        let out = spec.apply(&Matrix::from_rows(&[[1.0, 3.0, 2.0, 6.0]])).unwrap();
        assert_eq!(out[(0, 0)], 5.0);
    }

    #[test]
    fn blocks_apply_independently() {
        let spec = MlpSpec::new(vec![MlpStep::Blocks(vec![
            (1, MlpSpec::new(vec![MlpStep::PadConst(vec![9.0])])),
            (2, MlpSpec::new(vec![MlpStep::SelectCols(vec![1])])),
        ])]);
        let out = spec.apply(&Matrix::from_rows(&[[1.0, 2.0, 3.0]])).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[1.0, 9.0, 3.0]]));
    }

    #[test]
    fn budget_is_enforced() {
        let spec = MlpSpec::new(vec![MlpStep::Affine { weight: Matrix::identity(3), bias: vec![0.0; 3] }]);
        let x = Matrix::zeros(2, 3);
        assert!(mlp_apply(&spec, &x, 12).is_ok());
        assert!(matches!(mlp_apply(&spec, &x, 11), Err(Error::Restriction(_))));
    }

    #[test]
    fn bad_widths_are_shape_errors() {
        let spec = MlpSpec::new(vec![MlpStep::SelectCols(vec![4])]);
        assert!(matches!(spec.output_width(3), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn ratio_recovery_round_trips(log_a in -6.0f64..6.0) {
            let a = 10f64.powf(log_a);
            let spec = MlpSpec::new(vec![MlpStep::RatioRecover { col: 0, scale: 1.0 }]);
            let got = spec.apply(&Matrix::column(&[a / (a + 1.0)])).unwrap()[(0, 0)];
            prop_assert!((got - a).abs() <= 1e-9 * a);
        }

        #[test]
        fn row_local_steps_ignore_other_rows(a in proptest::collection::vec(-3.0f64..3.0, 6), b in -3.0f64..3.0) {
            let spec = MlpSpec::new(vec![
                MlpStep::Affine { weight: Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]), bias: vec![0.1, 0.2] },
                MlpStep::PadConst(vec![1.0]),
                MlpStep::SelectCols(vec![2, 0, 1]),
            ]);
            let x = Matrix::from_vec(3, 2, a).unwrap();
            let mut y = x.clone();
            y[(2, 0)] = b;
            let (ox, oy) = (spec.apply(&x).unwrap(), spec.apply(&y).unwrap());
            prop_assert_eq!(ox.slice_rows(0..2), oy.slice_rows(0..2));
        }
    }
}
