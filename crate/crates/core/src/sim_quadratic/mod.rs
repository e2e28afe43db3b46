//! Exact simulation with `O((N/M)^2)` oracle calls per head.
//!
//! Every query chunk meets every key chunk twice: once to read the block normalizer
//! `A = sum_j exp(<q_i, k_j>)` and once to read the block ratio `B / A`. The exact output
//! is then the `A`-weighted average of the block ratios.

pub mod causal;
pub(crate) mod drive;
pub mod pack;

pub use causal::{prefix_denoms_causal, simulate_full_causal, suffix_stats_causal, CausalBlockStats};
pub use drive::{Fault, Recombination, SimOptions};

use crate::construct;
use crate::error::{config, Result};
use crate::mlp::mlp_apply;
use crate::oracle::{CallTag, Job, Workbench, MLP_BUDGET_FACTOR};
use crate::reference::{HeadParams, LayerParams, TransformerParams};
use crate::tensor::{MaskKind, Matrix};
use drive::{check_slot_width, run_layers, Assembled, Scheme};

/// Normalizers and ratios of every (query chunk, key chunk) block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    /// `N x T`: entry `(i, t)` sums `exp(<q_i, k_j>)` over key chunk `t`.
    pub a: Matrix,
    /// One `N x m` matrix per key chunk.
    pub r: Vec<Matrix>,
    pub chunk: usize,
    pub t_count: usize,
}

impl BlockStats {
    pub fn recombination(&self) -> Recombination {
        Recombination { weights: self.a.clone(), ratios: self.r.clone(), signs: vec![1.0; self.t_count] }
    }
}

/// Applies a recombination as a host MLP step under the usual per-token budget.
pub fn apply_recombination(rc: &Recombination) -> Result<Matrix> {
    let table = rc.table()?;
    mlp_apply(&rc.spec(), &table, MLP_BUDGET_FACTOR * table.cols().pow(2))
}

pub fn recombine(stats: &BlockStats) -> Result<Matrix> {
    apply_recombination(&stats.recombination())
}

/// Chunk count after checking the chunking rules shared by every block algorithm.
pub(crate) fn chunk_count(n: usize, chunk: usize, wb: &dyn Workbench) -> Result<usize> {
    let m_max = wb.capacity().m_max;
    if chunk == 0 || chunk + 1 > m_max {
        return Err(config(format!("chunk {chunk} must be between 1 and m_max - 1 = {}", m_max.saturating_sub(1))));
    }
    if !n.is_multiple_of(chunk) {
        return Err(config(format!("sequence length {n} is not divisible by chunk {chunk}")));
    }
    Ok(n / chunk)
}

pub(crate) fn check_masks(wb: &dyn Workbench, p: &TransformerParams, model: MaskKind, oracle: MaskKind) -> Result<()> {
    if p.mask != model {
        return Err(config(format!("this simulation needs a {model:?} model, got {:?}", p.mask)));
    }
    if wb.capacity().mask != oracle {
        return Err(config(format!("this simulation needs a {oracle:?} oracle, got {:?}", wb.capacity().mask)));
    }
    Ok(())
}

pub(crate) fn chunks(x: &Matrix, chunk: usize) -> Vec<Matrix> {
    (0..x.rows() / chunk).map(|t| x.slice_rows(t * chunk..(t + 1) * chunk)).collect()
}

fn run_one(wb: &mut dyn Workbench, job: Job) -> Result<Matrix> {
    Ok(wb.run_round(vec![job], false)?.pop().expect("one job, one output"))
}

/// Block normalizers of queries `xq` against keys `xk`, in one dense oracle call.
pub fn denom_block(wb: &mut dyn Workbench, xq: &Matrix, xk: &Matrix, head: &HeadParams) -> Result<Vec<f64>> {
    Ok(run_one(wb, construct::cross_denominator(CallTag::Denominator, xq, xk, head, 1.0)?)?.col_values(0))
}

/// Softmax of queries `xq` over only the keys and values of `xk`, in one dense oracle call.
pub fn ratio_block(wb: &mut dyn Workbench, xq: &Matrix, xk: &Matrix, head: &HeadParams) -> Result<Matrix> {
    run_one(wb, construct::cross_ratio(CallTag::Ratio, xq, xk, head)?)
}

struct Dense {
    chunk: usize,
    t_count: usize,
}

impl Scheme for Dense {
    fn denominators(&self, _: usize, _: usize, x: &Matrix, head: &HeadParams) -> Result<Vec<Job>> {
        let blocks = chunks(x, self.chunk);
        let mut jobs = Vec::with_capacity(self.t_count * self.t_count);
        for xq in &blocks {
            for xk in &blocks {
                jobs.push(construct::cross_denominator(CallTag::Denominator, xq, xk, head, 1.0)?);
            }
        }
        Ok(jobs)
    }

    fn ratios(&self, _: usize, _: usize, x: &Matrix, head: &HeadParams) -> Result<Vec<Job>> {
        let blocks = chunks(x, self.chunk);
        let mut jobs = Vec::with_capacity(self.t_count * self.t_count);
        for (t, xq) in blocks.iter().enumerate() {
            for (u, xk) in blocks.iter().enumerate() {
                jobs.push(if t == u {
                    construct::direct_ratio(xq, head, 0..self.chunk)
                } else {
                    construct::cross_ratio(CallTag::Ratio, xq, xk, head)?
                });
            }
        }
        Ok(jobs)
    }

    fn assemble(&mut self, _: usize, _: usize, den: Vec<Matrix>, rat: Vec<Matrix>) -> Result<Assembled> {
        let (t_count, chunk) = (self.t_count, self.chunk);
        let n = t_count * chunk;
        let width = rat[0].cols();
        let a = Matrix::from_fn(n, t_count, |i, u| den[(i / chunk) * t_count + u][(i % chunk, 0)]);
        let r = (0..t_count)
            .map(|u| Matrix::from_fn(n, width, |i, c| rat[(i / chunk) * t_count + u][(i % chunk, c)]))
            .collect();
        Ok(Assembled::Recombine(BlockStats { a, r, chunk, t_count }.recombination()))
    }
}

pub(crate) fn single_head_model(head: &HeadParams, mask: MaskKind) -> TransformerParams {
    TransformerParams {
        input_mlp: Default::default(),
        layers: vec![LayerParams { heads: vec![head.clone()], mlp: Default::default(), residual: false }],
        mask,
    }
}

/// Exact dense attention of one head: `T^2` denominator and `T^2` ratio calls.
pub fn simulate_single_head(
    wb: &mut dyn Workbench,
    x: &Matrix,
    head: &HeadParams,
    chunk: usize,
    opts: &SimOptions,
) -> Result<Matrix> {
    simulate_full(wb, x, &single_head_model(head, MaskKind::Dense), chunk, opts)
}

/// Head by head and layer by layer, one instance per call.
pub fn flatten_heads_layers(wb: &mut dyn Workbench, x: &Matrix, p: &TransformerParams, chunk: usize) -> Result<Matrix> {
    simulate_full(wb, x, p, chunk, &SimOptions { pack: false, ..SimOptions::default() })
}

/// Exact dense simulation of a whole model, packing instances into calls when `opts.pack`.
pub fn simulate_full(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    chunk: usize,
    opts: &SimOptions,
) -> Result<Matrix> {
    check_masks(wb, p, MaskKind::Dense, MaskKind::Dense)?;
    let t_count = chunk_count(x.rows(), chunk, wb)?;
    check_slot_width(wb, construct::slot_width(p.width() / p.heads().max(1)), opts.pack)?;
    run_layers(wb, x, p, opts, &mut Dense { chunk, t_count })
}

/// Closed-form call counts of the exact simulations.
pub mod expected {
    /// Calls for `jobs` same-length instances at `per_call` instances per call.
    pub fn packed(jobs: usize, per_call: usize) -> usize {
        jobs.div_ceil(per_call.max(1))
    }

    /// Dense or causal quadratic simulation: per layer, one call batch of `T^2 H`
    /// denominators and one of `T^2 H` ratios, plus `N H` sums in pure recombination.
    pub fn quadratic(n: usize, chunk: usize, heads: usize, layers: usize, per_call: usize, pure: bool) -> usize {
        let t = n / chunk;
        let sums = if pure { packed(n * heads, per_call) } else { 0 };
        layers * (2 * packed(t * t * heads, per_call) + sums)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleCapacity, OracleWorkbench};
    use crate::reference::{attention_head, transformer_forward};
    use crate::test_support::{max_rel_error, random_matrix, random_model};

    fn bench(m_max: usize, h_small: usize, l_small: usize, m: usize) -> OracleWorkbench {
        let d_small = h_small * l_small * construct::slot_width(m);
        OracleWorkbench::with_capacity(OracleCapacity::new(m_max, l_small, h_small, d_small, MaskKind::Dense).unwrap())
    }

    fn random_head(m: usize, seed: u64) -> HeadParams {
        HeadParams::new(random_matrix(m, m, seed), random_matrix(m, m, seed + 1), random_matrix(m, m, seed + 2))
            .unwrap()
    }

    #[test]
    fn zero_scores_give_the_block_size() {
        let mut wb = bench(5, 1, 1, 2);
        let h = HeadParams::new(Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::identity(2)).unwrap();
        let x = random_matrix(4, 2, 1);
        assert_eq!(
            denom_block(&mut wb, &x, &x, &h).unwrap().iter().map(|a| (a - 4.0).abs() < 1e-12).filter(|&b| b).count(),
            4
        );
        assert_eq!(wb.ledger().count(CallTag::Denominator), 1);
    }

    #[test]
    fn ratio_block_over_one_key_copies_its_value() {
        let mut wb = bench(5, 1, 1, 2);
        let h = random_head(2, 3);
        let xq = random_matrix(1, 2, 4);
        let xk = random_matrix(1, 2, 5);
        let out = ratio_block(&mut wb, &xq, &xk, &h).unwrap();
        assert!(out.max_abs_diff(&h.values(&xk).unwrap()) < 1e-15);
    }

    #[test]
    fn one_block_needs_two_calls() {
        let mut wb = bench(5, 1, 1, 2);
        let (x, h) = (random_matrix(4, 2, 6), random_head(2, 7));
        let out = simulate_single_head(&mut wb, &x, &h, 4, &SimOptions::default()).unwrap();
        assert_eq!(wb.ledger().total(), 2);
        assert!(max_rel_error(&out, &attention_head(&x, &h, MaskKind::Dense).unwrap()) < 1e-12);
    }

    #[test]
    fn eight_tokens_in_chunks_of_two_take_thirty_two_calls() {
        let mut wb = bench(3, 1, 1, 2);
        let (x, h) = (random_matrix(8, 2, 8), random_head(2, 9));
        simulate_single_head(&mut wb, &x, &h, 2, &SimOptions::default()).unwrap();
        assert_eq!(wb.ledger().total(), 32);
        assert_eq!(wb.ledger().rounds, 3);
    }

    #[test]
    fn single_head_matches_reference() {
        let mut wb = bench(5, 1, 1, 2);
        let (x, h) = (random_matrix(16, 2, 10), random_head(2, 11));
        let out = simulate_single_head(&mut wb, &x, &h, 4, &SimOptions::default()).unwrap();
        assert!(max_rel_error(&out, &attention_head(&x, &h, MaskKind::Dense).unwrap()) < 1e-8);
        assert_eq!(wb.ledger().total(), expected::quadratic(16, 4, 1, 1, 1, false));
    }

    #[test]
    fn recombine_single_block_is_identity() {
        let r = random_matrix(3, 2, 12);
        let stats = BlockStats { a: Matrix::column(&[1.0, 2.0, 3.0]), r: vec![r.clone()], chunk: 3, t_count: 1 };
        assert!(recombine(&stats).unwrap().max_abs_diff(&r) < 1e-15);
    }

    #[test]
    fn recombine_equal_blocks_returns_the_shared_ratio() {
        let v = Matrix::from_rows(&[[0.5, -1.0]]);
        let stats =
            BlockStats { a: Matrix::from_rows(&[[2.0, 2.0]]), r: vec![v.clone(), v.clone()], chunk: 1, t_count: 2 };
        assert!(recombine(&stats).unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn blockwise_statistics_recombine_to_dense_attention() {
        let mut wb = bench(3, 1, 1, 2);
        let (x, h) = (random_matrix(8, 2, 13), random_head(2, 14));
        let blocks = chunks(&x, 2);
        let mut a = Matrix::zeros(8, 4);
        let mut r = vec![Matrix::zeros(8, 2); 4];
        for (t, xq) in blocks.iter().enumerate() {
            for (u, xk) in blocks.iter().enumerate() {
                let den = denom_block(&mut wb, xq, xk, &h).unwrap();
                let rat = ratio_block(&mut wb, xq, xk, &h).unwrap();
                for p in 0..2 {
                    a[(2 * t + p, u)] = den[p];
                    r[u].row_mut(2 * t + p).copy_from_slice(rat.row(p));
                }
            }
        }
        let out = recombine(&BlockStats { a, r, chunk: 2, t_count: 4 }).unwrap();
        assert!(max_rel_error(&out, &attention_head(&x, &h, MaskKind::Dense).unwrap()) < 1e-10);
    }

    #[test]
    fn flattening_matches_the_reference_model() {
        let (x, p) = random_model(8, 4, 2, 2, MaskKind::Dense, 15);
        let mut wb = bench(3, 1, 1, 2);
        let out = flatten_heads_layers(&mut wb, &x, &p, 2).unwrap();
        assert!(max_rel_error(&out, &transformer_forward(&x, &p).unwrap()) < 1e-8);
        assert_eq!(wb.ledger().total(), 2 * 16 * 2 * 2);
    }

    #[test]
    fn identical_heads_on_identical_slices_agree() {
        let h = random_head(2, 16);
        let p = TransformerParams {
            input_mlp: Default::default(),
            layers: vec![LayerParams { heads: vec![h.clone(), h], mlp: Default::default(), residual: false }],
            mask: MaskKind::Dense,
        };
        let half = random_matrix(8, 2, 17);
        let x = crate::tensor::concat(&[&half, &half], crate::tensor::Axis::Cols).unwrap();
        let mut wb = bench(3, 1, 1, 2);
        let out = flatten_heads_layers(&mut wb, &x, &p, 2).unwrap();
        assert_eq!(out.slice_cols(0..2), out.slice_cols(2..4));
    }

    #[test]
    fn packing_divides_calls_by_the_slot_count() {
        let (x, p) = random_model(8, 4, 2, 2, MaskKind::Dense, 18);
        let mut wb = bench(3, 2, 2, 2);
        let out = simulate_full(&mut wb, &x, &p, 2, &SimOptions::default()).unwrap();
        assert_eq!(wb.ledger().total(), 32);
        assert!(wb.ledger().rounds <= 6);
        assert!(max_rel_error(&out, &transformer_forward(&x, &p).unwrap()) < 1e-8);
    }

    #[test]
    fn one_slot_oracle_packs_nothing() {
        let (x, p) = random_model(8, 4, 2, 1, MaskKind::Dense, 19);
        let mut a = bench(3, 1, 1, 2);
        let mut b = bench(3, 1, 1, 2);
        simulate_full(&mut a, &x, &p, 2, &SimOptions::default()).unwrap();
        flatten_heads_layers(&mut b, &x, &p, 2).unwrap();
        assert_eq!(a.ledger().total(), b.ledger().total());
    }

    #[test]
    fn pure_recombination_adds_one_sum_per_row() {
        let (x, p) = random_model(8, 4, 2, 1, MaskKind::Dense, 20);
        let opts = SimOptions { pack: false, pure_recombination: true, fault: None };
        let err = simulate_full(&mut bench(3, 1, 1, 2), &x, &p, 2, &opts).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)), "{err}");
        let mut wb = bench(4, 1, 1, 2);
        let out = simulate_full(&mut wb, &x, &p, 2, &opts).unwrap();
        assert_eq!(wb.ledger().count(CallTag::Sum), 16);
        assert_eq!(wb.ledger().total(), expected::quadratic(8, 2, 2, 1, 1, true));
        assert!(max_rel_error(&out, &transformer_forward(&x, &p).unwrap()) < 1e-8);
    }

    #[test]
    fn chunking_rules_are_config_errors() {
        let (x, p) = random_model(8, 4, 2, 1, MaskKind::Dense, 21);
        let mut wb = bench(4, 1, 1, 2);
        for chunk in [0, 3, 4] {
            let err = simulate_full(&mut wb, &x, &p, chunk, &SimOptions::default()).unwrap_err();
            assert!(matches!(err, crate::Error::Config(_)), "chunk {chunk}: {err}");
        }
    }
}
