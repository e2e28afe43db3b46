//! Exact causal simulation on a causal oracle.
//!
//! A causal oracle cannot see a whole cross block (query chunk `t`, earlier key chunk
//! `u`) in one call: with queries and keys sharing rows, query `p` only reaches keys
//! `0..=p`. Each cross block therefore splits into a prefix part (keys up to `p`) and a
//! suffix part (keys after `p`, read through a reversed arrangement). The diagonal block
//! is exactly the causal prefix.

use crate::construct;
use crate::error::Result;
use crate::oracle::{CallTag, Job, Workbench};
use crate::reference::{HeadParams, TransformerParams};
use crate::tensor::{MaskKind, Matrix};

use super::drive::{check_slot_width, run_layers, Assembled, Recombination, Scheme, SimOptions};
use super::{check_masks, chunk_count, chunks, run_one};

/// Split normalizers and ratios. For query chunk `t` and key chunk `u < t`, part 1 covers
/// key offsets up to the query's own offset and part 2 the rest; for `u == t`, part 1 is
/// the causal prefix and part 2 is empty. Blocks with `u > t` stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalBlockStats {
    pub a1: Matrix,
    pub a2: Matrix,
    pub r1: Vec<Matrix>,
    pub r2: Vec<Matrix>,
    pub chunk: usize,
    pub t_count: usize,
}

impl CausalBlockStats {
    pub fn recombination(&self) -> Recombination {
        let t = self.t_count;
        let weights =
            Matrix::from_fn(self.a1.rows(), 2 * t, |i, k| if k < t { self.a1[(i, k)] } else { self.a2[(i, k - t)] });
        let ratios = self.r1.iter().chain(&self.r2).cloned().collect();
        Recombination { weights, ratios, signs: vec![1.0; 2 * t] }
    }
}

/// `sum_{j <= i} exp(<q_i, k_j>)` for every row of one block, in one causal call.
pub fn prefix_denoms_causal(wb: &mut dyn Workbench, x: &Matrix, head: &HeadParams) -> Result<Vec<f64>> {
    let job = construct::prefix_denominator(x, x, head, 0..x.rows())?;
    Ok(run_one(wb, job)?.col_values(0))
}

/// Suffix normalizers `sum_{j > p}` and ratios of queries `xq` over keys `xk`, where both
/// blocks are indexed by offset within their chunk. Two causal calls.
pub fn suffix_stats_causal(
    wb: &mut dyn Workbench,
    xq: &Matrix,
    xk: &Matrix,
    head: &HeadParams,
) -> Result<(Vec<f64>, Matrix)> {
    let jobs = vec![construct::suffix_denominator(xq, xk, head)?, construct::suffix_ratio(xq, xk, head)?];
    let mut out = wb.run_round(jobs, false)?;
    let ratio = out.pop().expect("two outputs");
    Ok((out.pop().expect("two outputs").col_values(0), ratio))
}

struct Causal {
    chunk: usize,
    t_count: usize,
}

impl Scheme for Causal {
    fn denominators(&self, _: usize, _: usize, x: &Matrix, head: &HeadParams) -> Result<Vec<Job>> {
        let blocks = chunks(x, self.chunk);
        let mut jobs = Vec::with_capacity(self.t_count * self.t_count);
        for (t, xq) in blocks.iter().enumerate() {
            for xk in &blocks[..t] {
                jobs.push(construct::prefix_denominator(xq, xk, head, 0..self.chunk)?);
                jobs.push(construct::suffix_denominator(xq, xk, head)?);
            }
            jobs.push(construct::prefix_denominator(xq, xq, head, 0..self.chunk)?);
        }
        Ok(jobs)
    }

    fn ratios(&self, _: usize, _: usize, x: &Matrix, head: &HeadParams) -> Result<Vec<Job>> {
        let blocks = chunks(x, self.chunk);
        let mut jobs = Vec::with_capacity(self.t_count * self.t_count);
        for (t, xq) in blocks.iter().enumerate() {
            for xk in &blocks[..t] {
                jobs.push(construct::cross_ratio(CallTag::Ratio, xq, xk, head)?);
                jobs.push(construct::suffix_ratio(xq, xk, head)?);
            }
            jobs.push(construct::direct_ratio(xq, head, 0..self.chunk));
        }
        Ok(jobs)
    }

    fn assemble(&mut self, _: usize, _: usize, den: Vec<Matrix>, rat: Vec<Matrix>) -> Result<Assembled> {
        let (t_count, chunk) = (self.t_count, self.chunk);
        let n = t_count * chunk;
        let width = rat[0].cols();
        let mut stats = CausalBlockStats {
            a1: Matrix::zeros(n, t_count),
            a2: Matrix::zeros(n, t_count),
            r1: vec![Matrix::zeros(n, width); t_count],
            r2: vec![Matrix::zeros(n, width); t_count],
            chunk,
            t_count,
        };
        let mut k = 0;
        for t in 0..t_count {
            for u in 0..=t {
                let parts = if u < t { 2 } else { 1 };
                for p in 0..chunk {
                    let i = t * chunk + p;
                    stats.a1[(i, u)] = den[k][(p, 0)];
                    stats.r1[u].row_mut(i).copy_from_slice(rat[k].row(p));
                    if parts == 2 {
                        stats.a2[(i, u)] = den[k + 1][(p, 0)];
                        stats.r2[u].row_mut(i).copy_from_slice(rat[k + 1].row(p));
                    }
                }
                k += parts;
            }
        }
        Ok(Assembled::Recombine(stats.recombination()))
    }
}

/// Exact causal simulation: per head and layer, `T^2` prefix and suffix normalizer calls
/// and `T^2` ratio calls, packed into oracle calls when `opts.pack`.
pub fn simulate_full_causal(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    chunk: usize,
    opts: &SimOptions,
) -> Result<Matrix> {
    check_masks(wb, p, MaskKind::Causal, MaskKind::Causal)?;
    let t_count = chunk_count(x.rows(), chunk, wb)?;
    check_slot_width(wb, construct::slot_width(p.width() / p.heads().max(1)), opts.pack)?;
    run_layers(wb, x, p, opts, &mut Causal { chunk, t_count })
}
