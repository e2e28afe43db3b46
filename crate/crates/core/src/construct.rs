//! Single-head oracle jobs that expose block statistics.
//!
//! Cross jobs take raw rows `[key source | query source]`, each `m` wide, so one oracle
//! row can carry a query from one chunk and a key from another. Denominator jobs append a
//! zero synthetic row, a constant-1 column, and a real-token indicator. Every projected
//! query and key then gains a trailing 1, so all scores shift by the same +1, the synthetic
//! key contributes `exp(1)` with value 0, and real keys carry value 1. The output is
//! `A / (A + 1)` and `RatioRecover` turns it back into the normalizer `A`.

use std::ops::Range;

use crate::error::{config, Result};
use crate::mlp::{MlpSpec, MlpStep};
use crate::oracle::{pad_budget, CallTag, Job};
use crate::reference::HeadParams;
use crate::tensor::{concat, pad_constants, Axis, Matrix, Pad};

/// Where the zero synthetic row sits. Causal oracles need it on top so every query sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Synthetic {
    Top,
    Bottom,
}

fn cross_rows(xq: &Matrix, xk: &Matrix) -> Result<Matrix> {
    if xq.shape() != xk.shape() {
        return Err(config(format!("query rows {:?} and key rows {:?} must match", xq.shape(), xk.shape())));
    }
    concat(&[xk, xq], Axis::Cols)
}

fn with_synthetic(raw: &Matrix, at: Synthetic) -> Result<Matrix> {
    let at = match at {
        Synthetic::Top => 0,
        Synthetic::Bottom => raw.rows(),
    };
    pad_constants(raw, &[Pad::Row { at, values: vec![0.0; raw.cols()] }], pad_budget(raw.cols()))
}

fn block(rows: usize, cols: usize, place: &[(usize, usize, &Matrix)]) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for &(r0, c0, m) in place {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out[(r0 + i, c0 + j)] = m[(i, j)];
            }
        }
    }
    out
}

/// Head over `[keys | queries | 1 | indicator]` returning `A / (A + 1)`.
fn denominator_head(head: &HeadParams) -> HeadParams {
    let m = head.input_width();
    let qk = head.wq.cols();
    let one = Matrix::filled(1, 1, 1.0);
    HeadParams {
        wq: block(2 * m + 2, qk + 1, &[(m, 0, &head.wq), (2 * m, qk, &one)]),
        wk: block(2 * m + 2, qk + 1, &[(0, 0, &head.wk), (2 * m, qk, &one)]),
        wv: block(2 * m + 2, 1, &[(2 * m + 1, 0, &one)]),
    }
}

/// Head over `[keys | queries]` returning the softmax-weighted key values.
fn ratio_head(head: &HeadParams) -> HeadParams {
    let m = head.input_width();
    HeadParams {
        wq: block(2 * m, head.wq.cols(), &[(m, 0, &head.wq)]),
        wk: block(2 * m, head.wk.cols(), &[(0, 0, &head.wk)]),
        wv: block(2 * m, head.wv.cols(), &[(0, 0, &head.wv)]),
    }
}

fn key_block(m: usize) -> Range<usize> {
    0..m
}

fn query_block(m: usize) -> Range<usize> {
    m..2 * m
}

struct Denominator {
    tag: CallTag,
    input: Matrix,
    lookups: Vec<MlpStep>,
    real: Range<usize>,
    scale: f64,
    post: Vec<MlpStep>,
    keep: Range<usize>,
}

impl Denominator {
    fn job(self, head: &HeadParams) -> Job {
        let mut input_mlp = MlpSpec::new(self.lookups);
        input_mlp.steps.push(MlpStep::PadConst(vec![1.0]));
        input_mlp.steps.push(MlpStep::PadIndicator { rows: self.real });
        let mut output_mlp = MlpSpec::new(vec![MlpStep::RatioRecover { col: 0, scale: self.scale }]);
        output_mlp.steps.extend(self.post);
        Job { tag: self.tag, input: self.input, input_mlp, head: denominator_head(head), output_mlp, keep: self.keep }
    }
}

/// `scale * sum_j exp(<q_i, k_j>)` over every key, for a dense oracle.
pub(crate) fn cross_denominator(tag: CallTag, xq: &Matrix, xk: &Matrix, head: &HeadParams, scale: f64) -> Result<Job> {
    let n = xq.rows();
    Ok(Denominator {
        tag,
        input: with_synthetic(&cross_rows(xq, xk)?, Synthetic::Bottom)?,
        lookups: vec![],
        real: 0..n,
        scale,
        post: vec![],
        keep: 0..n,
    }
    .job(head))
}

/// Prefix sums `sum_{j <= p} exp(<q_p, k_j>)` for the queries in `queries`, where query
/// and key `p` share row `p`. Needs a causal oracle.
pub(crate) fn prefix_denominator(xq: &Matrix, xk: &Matrix, head: &HeadParams, queries: Range<usize>) -> Result<Job> {
    let n = xq.rows();
    Ok(Denominator {
        tag: CallTag::Prefix,
        input: with_synthetic(&cross_rows(xq, xk)?, Synthetic::Top)?,
        lookups: vec![],
        real: 1..n + 1,
        scale: 1.0,
        post: vec![],
        keep: queries.start + 1..queries.end + 1,
    }
    .job(head))
}

/// Suffix sums `sum_{j > p} exp(<q_p, k_j>)` on a causal oracle.
///
/// Keys are laid out in reverse below the synthetic row and query `p` sits on row
/// `n - 1 - p`, so the causal mask leaves exactly the keys after `p` visible.
pub(crate) fn suffix_denominator(xq: &Matrix, xk: &Matrix, head: &HeadParams) -> Result<Job> {
    let n = xq.rows();
    let m = xq.cols();
    let queries = (0..=n).map(|row| Some(if row < n { n - 1 - row } else { n })).collect();
    let keys = (0..=n).map(|row| Some(if row == 0 { n } else { n - row })).collect();
    let back = (0..=n).map(|u| (u < n).then(|| n - 1 - u)).collect();
    Ok(Denominator {
        tag: CallTag::Suffix,
        input: with_synthetic(&cross_rows(xq, xk)?, Synthetic::Bottom)?,
        lookups: vec![
            MlpStep::LookupShift { cols: query_block(m), source: queries },
            MlpStep::LookupShift { cols: key_block(m), source: keys },
        ],
        real: 1..n + 1,
        scale: 1.0,
        post: vec![MlpStep::LookupShift { cols: 0..1, source: back }],
        keep: 0..n,
    }
    .job(head))
}

/// `sum_{j <= p - shift} exp(<q_p, k_j>)` for queries `p` in `shift..n` of one region,
/// on a causal oracle: query `p` shares a row with key `p - shift`.
pub(crate) fn shifted_denominator(x: &Matrix, head: &HeadParams, shift: usize) -> Result<Job> {
    let n = x.rows();
    let m = x.cols();
    let queries =
        (0..=n).map(|row| if row == 0 { Some(0) } else { (row + shift <= n).then_some(row + shift) }).collect();
    Ok(Denominator {
        tag: CallTag::Prefix,
        input: with_synthetic(&cross_rows(x, x)?, Synthetic::Top)?,
        lookups: vec![MlpStep::LookupShift { cols: query_block(m), source: queries }],
        real: 1..n + 1,
        scale: 1.0,
        post: vec![],
        keep: 1..n - shift + 1,
    }
    .job(head))
}

/// Softmax of queries `xq` over the keys and values of `xk`. A causal oracle restricts
/// row `p` to keys `0..=p`.
pub(crate) fn cross_ratio(tag: CallTag, xq: &Matrix, xk: &Matrix, head: &HeadParams) -> Result<Job> {
    Ok(Job {
        tag,
        input: cross_rows(xq, xk)?,
        input_mlp: MlpSpec::identity(),
        head: ratio_head(head),
        output_mlp: MlpSpec::identity(),
        keep: 0..xq.rows(),
    })
}

/// The head run on `x` with its own weights, returning the rows in `keep`.
pub(crate) fn direct_ratio(x: &Matrix, head: &HeadParams, keep: Range<usize>) -> Job {
    Job {
        tag: CallTag::Ratio,
        input: x.clone(),
        input_mlp: MlpSpec::identity(),
        head: head.clone(),
        output_mlp: MlpSpec::identity(),
        keep,
    }
}

/// Softmax of query `p` over keys `j > p` on a causal oracle. The last query has no such
/// key; its row is zero and carries zero weight in the recombination.
pub(crate) fn suffix_ratio(xq: &Matrix, xk: &Matrix, head: &HeadParams) -> Result<Job> {
    let n = xq.rows();
    let m = xq.cols();
    let queries = (0..n).map(|row| (row + 2 <= n).then(|| n - 2 - row)).collect();
    let keys = (0..n).map(|row| Some(n - 1 - row)).collect();
    let back = (0..n).map(|u| (u + 2 <= n).then(|| n - 2 - u)).collect();
    let out_width = head.output_width();
    Ok(Job {
        tag: CallTag::Suffix,
        input: cross_rows(xq, xk)?,
        input_mlp: MlpSpec::new(vec![
            MlpStep::LookupShift { cols: query_block(m), source: queries },
            MlpStep::LookupShift { cols: key_block(m), source: keys },
        ]),
        head: ratio_head(head),
        output_mlp: MlpSpec::new(vec![MlpStep::LookupShift { cols: 0..out_width, source: back }]),
        keep: 0..n,
    })
}

/// Softmax of query `p` over keys `0..=p - shift` for queries `shift..n` of one region.
pub(crate) fn shifted_ratio(x: &Matrix, head: &HeadParams, shift: usize) -> Result<Job> {
    let n = x.rows();
    let m = x.cols();
    let queries = (0..n).map(|row| (row + shift < n).then_some(row + shift)).collect();
    Ok(Job {
        tag: CallTag::Ratio,
        input: cross_rows(x, x)?,
        input_mlp: MlpSpec::new(vec![MlpStep::LookupShift { cols: query_block(m), source: queries }]),
        head: ratio_head(head),
        output_mlp: MlpSpec::identity(),
        keep: 0..n - shift,
    })
}

/// Width of every job slot built here for an `m`-wide head.
pub(crate) fn slot_width(m: usize) -> usize {
    2 * m + 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{Oracle, OracleCapacity};
    use crate::rng::{self, Purpose};
    use crate::tensor::{matmul, MaskKind};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut g = rng::stream(seed, Purpose::Test, rows, cols);
        Matrix::from_fn(rows, cols, |_, _| g.random_range(-1.0..1.0))
    }

    fn head(seed: u64) -> HeadParams {
        HeadParams::new(random(2, 2, seed), random(2, 2, seed + 1), random(2, 2, seed + 2)).unwrap()
    }

    fn run(job: &Job, mask: MaskKind) -> Matrix {
        let cap = OracleCapacity::new(8, 1, 1, 8, mask).unwrap();
        let out = Oracle::new(cap).evaluate(&job.input, &job.single_params(mask)).unwrap();
        out.slice_rows(job.keep.clone())
    }

    /// `(sum_j exp(s_ij), sum_j exp(s_ij) v_j)` over keys `j` accepted by `take(i, j)`.
    fn direct(xq: &Matrix, xk: &Matrix, h: &HeadParams, take: impl Fn(usize, usize) -> bool) -> (Vec<f64>, Matrix) {
        let q = matmul(xq, &h.wq).unwrap();
        let k = matmul(xk, &h.wk).unwrap();
        let v = matmul(xk, &h.wv).unwrap();
        let mut a = vec![0.0; xq.rows()];
        let mut b = Matrix::zeros(xq.rows(), v.cols());
        for i in 0..xq.rows() {
            for j in 0..xk.rows() {
                if take(i, j) {
                    let e = q.row(i).iter().zip(k.row(j)).map(|(x, y)| x * y).sum::<f64>().exp();
                    a[i] += e;
                    for c in 0..v.cols() {
                        b[(i, c)] += e * v[(j, c)];
                    }
                }
            }
        }
        (a, b)
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= tol * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    fn assert_ratio(got: &Matrix, a: &[f64], b: &Matrix) {
        for i in 0..got.rows() {
            for c in 0..got.cols() {
                let want = if a[i] == 0.0 { 0.0 } else { b[(i, c)] / a[i] };
                assert!((got[(i, c)] - want).abs() < 1e-12, "row {i}: {} vs {want}", got[(i, c)]);
            }
        }
    }

    #[test]
    fn zero_scores_count_the_block() {
        let h = HeadParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        let x = random(4, 2, 1);
        let job = cross_denominator(CallTag::Denominator, &x, &x, &h, 1.0).unwrap();
        assert_close(&run(&job, MaskKind::Dense).col_values(0), &[4.0; 4], 1e-12);
    }

    #[test]
    fn one_pair_with_unit_score_gives_e() {
        let h = HeadParams::new(Matrix::identity(1), Matrix::identity(1), Matrix::identity(1)).unwrap();
        let x = Matrix::column(&[1.0]);
        let job = cross_denominator(CallTag::Denominator, &x, &x, &h, 1.0).unwrap();
        assert!((run(&job, MaskKind::Dense)[(0, 0)] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn cross_denominator_matches_direct_sum() {
        let (xq, xk, h) = (random(4, 2, 2), random(4, 2, 3), head(4));
        let job = cross_denominator(CallTag::Denominator, &xq, &xk, &h, 1.0).unwrap();
        let (a, _) = direct(&xq, &xk, &h, |_, _| true);
        assert_close(&run(&job, MaskKind::Dense).col_values(0), &a, 1e-10);
    }

    #[test]
    fn cross_ratio_matches_cross_attention() {
        let (xq, xk, h) = (random(4, 2, 5), random(4, 2, 6), head(7));
        let job = cross_ratio(CallTag::Ratio, &xq, &xk, &h).unwrap();
        let (a, b) = direct(&xq, &xk, &h, |_, _| true);
        assert_ratio(&run(&job, MaskKind::Dense), &a, &b);
    }

    #[test]
    fn prefix_sums_with_zero_scores_count_up() {
        let h = HeadParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        let x = random(5, 2, 8);
        let job = prefix_denominator(&x, &x, &h, 0..5).unwrap();
        assert_close(&run(&job, MaskKind::Causal).col_values(0), &[1.0, 2.0, 3.0, 4.0, 5.0], 1e-12);
    }

    #[test]
    fn prefix_and_suffix_statistics_match_direct_loops() {
        let (xq, xk, h) = (random(5, 2, 9), random(5, 2, 10), head(11));
        let (a1, b1) = direct(&xq, &xk, &h, |i, j| j <= i);
        let (a2, b2) = direct(&xq, &xk, &h, |i, j| j > i);
        let got = run(&prefix_denominator(&xq, &xk, &h, 0..5).unwrap(), MaskKind::Causal);
        assert_close(&got.col_values(0), &a1, 1e-10);
        assert!((got[(0, 0)] - a1[0]).abs() < 1e-12);
        let got = run(&suffix_denominator(&xq, &xk, &h).unwrap(), MaskKind::Causal);
        assert_close(&got.col_values(0), &a2, 1e-10);
        assert_eq!(got[(4, 0)], 0.0);
        assert_ratio(&run(&cross_ratio(CallTag::Ratio, &xq, &xk, &h).unwrap(), MaskKind::Causal), &a1, &b1);
        assert_ratio(&run(&suffix_ratio(&xq, &xk, &h).unwrap(), MaskKind::Causal), &a2, &b2);
    }

    #[test]
    fn suffix_with_zero_scores_counts_the_tail() {
        let h = HeadParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        let x = random(4, 2, 12);
        let got = run(&suffix_denominator(&x, &x, &h).unwrap(), MaskKind::Causal);
        assert_close(&got.col_values(0), &[3.0, 2.0, 1.0, 0.0], 1e-12);
    }

    #[test]
    fn shifted_statistics_match_direct_loops() {
        let (x, h) = (random(6, 2, 13), head(14));
        for shift in 1..4 {
            let (a, b) = direct(&x, &x, &h, |i, j| j + shift <= i);
            let got = run(&shifted_denominator(&x, &h, shift).unwrap(), MaskKind::Causal);
            assert_close(&got.col_values(0), &a[shift..], 1e-10);
            let b = b.slice_rows(shift..6);
            assert_ratio(&run(&shifted_ratio(&x, &h, shift).unwrap(), MaskKind::Causal), &a[shift..], &b);
        }
    }

    #[test]
    fn slots_fit_the_declared_width() {
        let (x, h) = (random(4, 2, 15), head(16));
        for job in [
            cross_denominator(CallTag::Denominator, &x, &x, &h, 1.0).unwrap(),
            suffix_denominator(&x, &x, &h).unwrap(),
            shifted_ratio(&x, &h, 1).unwrap(),
            direct_ratio(&x, &h, 0..4),
        ] {
            assert!(job.slot_width().unwrap() <= slot_width(2));
        }
    }
}
