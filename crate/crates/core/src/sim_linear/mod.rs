//! Simulations with a linear number of oracle calls: the average-case sampling estimator
//! and the exact sliding-window and attention-sink simulations.

pub mod average;
pub mod window;

pub use average::{avg_denominator_estimate, avg_simulate, hoeffding_chunk, permutation, SampleEstimate};
pub use window::{sink_simulate, window_simulate};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::reference::HeadParams;
use crate::tensor::{matmul, Matrix};

/// The average-case hypotheses: `1/C <= a_ij <= C` and
/// `D N max_j |b_ij| <= |sum_j b_ij|` for every query `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundednessProfile {
    pub c_bound: f64,
    /// Required `D`; `None` only measures it.
    pub d_bound: Option<f64>,
    pub verified: bool,
}

impl BoundednessProfile {
    pub fn new(c_bound: f64, d_bound: Option<f64>) -> Result<Self> {
        if c_bound.is_nan() || c_bound < 1.0 {
            return Err(config(format!("C = {c_bound} must be at least 1")));
        }
        if let Some(d) = d_bound {
            if !(d > 0.0 && d <= 1.0) {
                return Err(config(format!("D = {d} must lie in (0, 1]")));
            }
        }
        Ok(BoundednessProfile { c_bound, d_bound, verified: false })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundednessReport {
    /// The checked profile, `verified` set when both inequalities hold everywhere.
    pub profile: BoundednessProfile,
    pub min_a: f64,
    pub max_a: f64,
    /// Largest `D` every query satisfies.
    pub d_achieved: f64,
    /// Worst `(query, key, a_ij)` outside `[1/C, C]`, at most five.
    pub a_violations: Vec<(usize, usize, f64)>,
    /// Worst `(query, D_i)` below the required `D`, at most five.
    pub d_violations: Vec<(usize, f64)>,
    pub passed: bool,
}

const WORST: usize = 5;

/// Checks both hypotheses exhaustively by direct computation.
pub fn check_boundedness(x: &Matrix, head: &HeadParams, profile: &BoundednessProfile) -> Result<BoundednessReport> {
    let q = head.queries(x)?;
    let k = head.keys(x)?;
    let v = head.values(x)?;
    let a = matmul(&q, &k.transpose())?.map(f64::exp);
    let n = x.rows();
    let c = profile.c_bound;
    let (lo, hi) = (1.0 / c, c);
    let slack = 1e-12;
    let mut min_a = f64::INFINITY;
    let mut max_a = 0.0f64;
    let mut a_violations = Vec::new();
    let mut d_per_row = Vec::with_capacity(n);
    let norms: Vec<f64> = (0..n).map(|j| v.row_norm(j)).collect();
    for i in 0..n {
        let mut sum = vec![0.0; v.cols()];
        let mut largest = 0.0f64;
        for j in 0..n {
            let aij = a[(i, j)];
            min_a = min_a.min(aij);
            max_a = max_a.max(aij);
            if aij < lo * (1.0 - slack) || aij > hi * (1.0 + slack) {
                a_violations.push((i, j, aij));
            }
            for (s, vj) in sum.iter_mut().zip(v.row(j)) {
                *s += aij * vj;
            }
            largest = largest.max(aij * norms[j]);
        }
        let total = sum.iter().map(|s| s * s).sum::<f64>().sqrt();
        d_per_row.push(if largest == 0.0 { 1.0 } else { total / (n as f64 * largest) });
    }
    let excess = |aij: f64| if aij > hi { aij / hi } else { lo / aij };
    a_violations.sort_by(|x, y| excess(y.2).total_cmp(&excess(x.2)));
    a_violations.truncate(WORST);
    let d_achieved = d_per_row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut d_violations: Vec<(usize, f64)> = match profile.d_bound {
        Some(d) => d_per_row.iter().copied().enumerate().filter(|&(_, di)| di < d).collect(),
        None => vec![],
    };
    d_violations.sort_by(|x, y| x.1.total_cmp(&y.1));
    d_violations.truncate(WORST);
    let passed = a_violations.is_empty() && d_violations.is_empty();
    Ok(BoundednessReport {
        profile: BoundednessProfile { verified: passed, ..*profile },
        min_a,
        max_a,
        d_achieved,
        a_violations,
        d_violations,
        passed,
    })
}
