//! The average-case estimator: each query chunk attends to a random chunk-sized sample of
//! keys, drawn by a seeded permutation.
//!
//! Step 1 estimates the full normalizer as `(N / M) * sum_{j in tau(S_t)} a_ij`. Step 2 reads
//! the sampled ratio `sum b / sum a` over the same sample size, which is the output. The
//! step 1 estimates are kept for diagnostics only.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::construct;
use crate::error::Result;
use crate::oracle::{CallTag, Job, Workbench};
use crate::reference::{HeadParams, TransformerParams};
use crate::rng::{self, Purpose};
use crate::sim_quadratic::drive::{check_slot_width, run_layers, Assembled, Scheme, SimOptions};
use crate::sim_quadratic::{check_masks, chunk_count, chunks};
use crate::tensor::{concat, Axis, MaskKind, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEstimate {
    pub output: Matrix,
    /// `N x (H L)`: step 1 normalizer estimates, column `layer * H + head`.
    pub denom_estimates: Matrix,
    pub permutation_seed: u64,
    pub epsilon_target: f64,
}

/// The key permutation of one estimator step for one head.
pub fn permutation(seed: u64, step: u8, layer: usize, head: usize, n: usize) -> Vec<usize> {
    let mut tau: Vec<usize> = (0..n).collect();
    tau.shuffle(&mut rng::stream(seed, Purpose::Permutation { step }, layer, head));
    tau
}

/// Sample size at which the Hoeffding argument gives error `epsilon` with probability 0.9:
/// `8 C^4 ln(40 N) / epsilon^2`.
pub fn hoeffding_chunk(c_bound: f64, n: usize, epsilon: f64) -> f64 {
    8.0 * c_bound.powi(4) * (40.0 * n as f64).ln() / (epsilon * epsilon)
}

fn sampled_keys(x: &Matrix, tau: &[usize], chunk: usize, t: usize) -> Matrix {
    x.select_rows(&tau[t * chunk..(t + 1) * chunk])
}

fn step_one_jobs(x: &Matrix, head: &HeadParams, tau: &[usize], chunk: usize) -> Result<Vec<Job>> {
    let scale = (x.rows() / chunk) as f64;
    chunks(x, chunk)
        .iter()
        .enumerate()
        .map(|(t, xq)| construct::cross_denominator(CallTag::Sample, xq, &sampled_keys(x, tau, chunk, t), head, scale))
        .collect()
}

/// Step 1 alone for one head: `T` calls, one per query chunk.
pub fn avg_denominator_estimate(
    wb: &mut dyn Workbench,
    x: &Matrix,
    head: &HeadParams,
    tau: &[usize],
    chunk: usize,
) -> Result<Vec<f64>> {
    chunk_count(x.rows(), chunk, wb)?;
    let out = wb.run_round(step_one_jobs(x, head, tau, chunk)?, false)?;
    Ok(out.iter().flat_map(|m| m.col_values(0)).collect())
}

struct Average {
    chunk: usize,
    seed: u64,
    heads: usize,
    denom_estimates: Matrix,
}

impl Scheme for Average {
    fn denominators(&self, layer: usize, head: usize, x: &Matrix, params: &HeadParams) -> Result<Vec<Job>> {
        step_one_jobs(x, params, &permutation(self.seed, 1, layer, head, x.rows()), self.chunk)
    }

    fn ratios(&self, layer: usize, head: usize, x: &Matrix, params: &HeadParams) -> Result<Vec<Job>> {
        let tau = permutation(self.seed, 2, layer, head, x.rows());
        chunks(x, self.chunk)
            .iter()
            .enumerate()
            .map(|(t, xq)| construct::cross_ratio(CallTag::Sample, xq, &sampled_keys(x, &tau, self.chunk, t), params))
            .collect()
    }

    fn assemble(&mut self, layer: usize, head: usize, den: Vec<Matrix>, rat: Vec<Matrix>) -> Result<Assembled> {
        let col = layer * self.heads + head;
        for (i, a) in den.iter().flat_map(|m| m.col_values(0)).enumerate() {
            self.denom_estimates[(i, col)] = a;
        }
        let refs: Vec<&Matrix> = rat.iter().collect();
        Ok(Assembled::Output(concat(&refs, Axis::Rows)?))
    }
}

/// Average-case simulation of a dense model: two rounds of `T` calls per head and layer,
/// packed into oracle calls when `opts.pack`.
pub fn avg_simulate(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    chunk: usize,
    seed: u64,
    epsilon_target: f64,
    opts: &SimOptions,
) -> Result<SampleEstimate> {
    check_masks(wb, p, MaskKind::Dense, MaskKind::Dense)?;
    chunk_count(x.rows(), chunk, wb)?;
    check_slot_width(wb, construct::slot_width(p.width() / p.heads().max(1)), opts.pack)?;
    let mut scheme =
        Average { chunk, seed, heads: p.heads(), denom_estimates: Matrix::zeros(x.rows(), p.heads() * p.depth()) };
    let output = run_layers(wb, x, p, &SimOptions { pure_recombination: false, ..*opts }, &mut scheme)?;
    Ok(SampleEstimate { output, denom_estimates: scheme.denom_estimates, permutation_seed: seed, epsilon_target })
}
