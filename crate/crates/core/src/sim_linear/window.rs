//! Exact sliding-window and attention-sink simulation on a causal oracle.
//!
//! Queries `r..N` are cut into chunks of `M - r`. A chunk starting at `a` lives in the
//! region `a - r .. a - r + M`, where each query's window is a prefix difference:
//! keys `a - r ..= i` minus keys `a - r ..= i - r`. Both prefixes come from causal calls on
//! the region, the second with queries shifted `r` rows up against the keys. The first `r`
//! queries see all their keys and come from two causal calls on the first block.
//!
//! Sink keys `0..s` are a prefix difference as well: a causal call on `[sink | piece]`
//! minus a causal call on the piece alone, for pieces of at most `M - s` queries.

use std::ops::Range;

use crate::construct;
use crate::error::{config, Result};
use crate::oracle::{Job, Workbench};
use crate::reference::{HeadParams, TransformerParams};
use crate::sim_quadratic::check_masks;
use crate::sim_quadratic::drive::{check_slot_width, run_layers, Assembled, Recombination, Scheme, SimOptions};
use crate::tensor::{concat, Axis, MaskKind, Matrix};

/// Chunking of one windowed simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub n: usize,
    pub chunk: usize,
    pub r: usize,
    pub sink: Option<usize>,
}

impl WindowPlan {
    pub fn new(n: usize, chunk: usize, r: usize, sink: Option<usize>) -> Result<Self> {
        if r == 0 || r >= chunk {
            return Err(config(format!("window r = {r} must be in 1..chunk = {chunk}")));
        }
        if n > r && !(n - r).is_multiple_of(chunk - r) {
            return Err(config(format!("n - r = {} is not divisible by chunk - r = {}", n - r, chunk - r)));
        }
        if let Some(s) = sink {
            if s == 0 || s + r > chunk {
                return Err(config(format!("sink s = {s} needs 1 <= s and s + r <= chunk = {chunk}")));
            }
        }
        Ok(WindowPlan { n, chunk, r, sink })
    }

    /// Rows of the first block.
    pub fn first_len(&self) -> usize {
        self.chunk.min(self.n)
    }

    /// Queries answered by the first block alone.
    pub fn first_queries(&self) -> usize {
        (self.r + self.sink.unwrap_or(0)).min(self.n)
    }

    /// Start of each window chunk's queries.
    pub fn chunk_starts(&self) -> Vec<usize> {
        if self.n <= self.r {
            return vec![];
        }
        let step = self.chunk - self.r;
        (0..(self.n - self.r) / step).map(|t| self.r + t * step).collect()
    }

    /// Query pieces needing sink terms in the chunk starting at `a`.
    pub fn sink_pieces(&self, a: usize) -> Vec<Range<usize>> {
        let Some(s) = self.sink else { return vec![] };
        let end = a + self.chunk - self.r;
        let mut start = a.max(s + self.r);
        let mut out = Vec::new();
        while start < end {
            let stop = (start + self.chunk - s).min(end);
            out.push(start..stop);
            start = stop;
        }
        out
    }

    /// Row counts of the denominator and ratio jobs of one head, round by round.
    pub fn job_lengths(&self) -> [Vec<usize>; 2] {
        let mut den = vec![self.first_len() + 1];
        let mut rat = vec![self.first_len()];
        let s = self.sink.unwrap_or(0);
        for a in self.chunk_starts() {
            den.extend([self.chunk + 1; 2]);
            rat.extend([self.chunk; 2]);
            for piece in self.sink_pieces(a) {
                den.extend([s + piece.len() + 1, piece.len() + 1]);
                rat.extend([s + piece.len(), piece.len()]);
            }
        }
        [den, rat]
    }

    /// Closed-form calls for one head without packing: `2 + 4 T` plus 4 per sink piece.
    pub fn calls_per_head(&self) -> usize {
        let starts = self.chunk_starts();
        let pieces: usize = starts.iter().map(|&a| self.sink_pieces(a).len()).sum();
        2 + 4 * starts.len() + 4 * pieces
    }

    /// Calls for `heads` heads over `layers` layers when each call holds up to `per_call`
    /// same-length jobs.
    pub fn packed_calls(&self, heads: usize, layers: usize, per_call: usize) -> usize {
        let per_layer: usize = self
            .job_lengths()
            .iter()
            .map(|lengths| {
                let mut counts = std::collections::BTreeMap::new();
                for &len in lengths {
                    *counts.entry(len).or_insert(0usize) += heads;
                }
                counts.values().map(|&c| c.div_ceil(per_call.max(1))).sum::<usize>()
            })
            .sum();
        layers * per_layer
    }

    fn parts(&self) -> usize {
        if self.sink.is_some() {
            4
        } else {
            2
        }
    }
}

struct Windowed {
    plan: WindowPlan,
}

impl Windowed {
    fn region(&self, x: &Matrix, a: usize) -> Matrix {
        let start = a - self.plan.r;
        x.slice_rows(start..start + self.plan.chunk)
    }

    fn compound(&self, x: &Matrix, piece: &Range<usize>) -> Result<Matrix> {
        let s = self.plan.sink.unwrap_or(0);
        concat(&[&x.slice_rows(0..s), &x.slice_rows(piece.clone())], Axis::Rows)
    }
}

impl Scheme for Windowed {
    fn denominators(&self, _: usize, _: usize, x: &Matrix, head: &HeadParams) -> Result<Vec<Job>> {
        let WindowPlan { chunk, r, .. } = self.plan;
        let s = self.plan.sink.unwrap_or(0);
        let first = x.slice_rows(0..self.plan.first_len());
        let mut jobs = vec![construct::prefix_denominator(&first, &first, head, 0..first.rows())?];
        for a in self.plan.chunk_starts() {
            let region = self.region(x, a);
            jobs.push(construct::prefix_denominator(&region, &region, head, r..chunk)?);
            jobs.push(construct::shifted_denominator(&region, head, r)?);
            for piece in self.plan.sink_pieces(a) {
                let joined = self.compound(x, &piece)?;
                let alone = x.slice_rows(piece.clone());
                jobs.push(construct::prefix_denominator(&joined, &joined, head, s..joined.rows())?);
                jobs.push(construct::prefix_denominator(&alone, &alone, head, 0..alone.rows())?);
            }
        }
        Ok(jobs)
    }

    fn ratios(&self, _: usize, _: usize, x: &Matrix, head: &HeadParams) -> Result<Vec<Job>> {
        let WindowPlan { chunk, r, .. } = self.plan;
        let s = self.plan.sink.unwrap_or(0);
        let first = x.slice_rows(0..self.plan.first_len());
        let mut jobs = vec![construct::direct_ratio(&first, head, 0..first.rows())];
        for a in self.plan.chunk_starts() {
            let region = self.region(x, a);
            jobs.push(construct::direct_ratio(&region, head, r..chunk));
            jobs.push(construct::shifted_ratio(&region, head, r)?);
            for piece in self.plan.sink_pieces(a) {
                let joined = self.compound(x, &piece)?;
                let alone = x.slice_rows(piece.clone());
                jobs.push(construct::direct_ratio(&joined, head, s..joined.rows()));
                jobs.push(construct::direct_ratio(&alone, head, 0..alone.rows()));
            }
        }
        Ok(jobs)
    }

    fn assemble(&mut self, _: usize, _: usize, den: Vec<Matrix>, rat: Vec<Matrix>) -> Result<Assembled> {
        let plan = &self.plan;
        let n = plan.n;
        let width = rat[0].cols();
        let parts = plan.parts();
        let mut weights = Matrix::zeros(n, parts);
        let mut ratios = vec![Matrix::zeros(n, width); parts];
        let mut put = |part: usize, i: usize, d: &Matrix, r: &Matrix, row: usize| {
            weights[(i, part)] = d[(row, 0)];
            ratios[part].row_mut(i).copy_from_slice(r.row(row));
        };
        for i in 0..plan.first_queries() {
            put(0, i, &den[0], &rat[0], i);
        }
        let mut k = 1;
        for a in plan.chunk_starts() {
            let (full, shift) = (k, k + 1);
            k += 2;
            for local in 0..plan.chunk - plan.r {
                let i = a + local;
                if i >= plan.first_queries() {
                    put(0, i, &den[full], &rat[full], local);
                    put(1, i, &den[shift], &rat[shift], local);
                }
            }
            for piece in plan.sink_pieces(a) {
                for (row, i) in piece.enumerate() {
                    put(2, i, &den[k], &rat[k], row);
                    put(3, i, &den[k + 1], &rat[k + 1], row);
                }
                k += 2;
            }
        }
        let signs = [1.0, -1.0, 1.0, -1.0][..parts].to_vec();
        Ok(Assembled::Recombine(Recombination { weights, ratios, signs }))
    }
}

fn run(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    plan: WindowPlan,
    opts: &SimOptions,
) -> Result<Matrix> {
    if plan.chunk + 1 > wb.capacity().m_max {
        return Err(config(format!(
            "chunk {} must be at most m_max - 1 = {}",
            plan.chunk,
            wb.capacity().m_max.saturating_sub(1)
        )));
    }
    check_slot_width(wb, construct::slot_width(p.width() / p.heads().max(1)), opts.pack)?;
    run_layers(wb, x, p, &SimOptions { pure_recombination: false, ..*opts }, &mut Windowed { plan })
}

/// Exact `Window { r }` simulation on a causal oracle with `2 + 4 (N - r) / (M - r)` calls
/// per head and layer before packing.
pub fn window_simulate(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    chunk: usize,
    opts: &SimOptions,
) -> Result<Matrix> {
    let MaskKind::Window { r } = p.mask else {
        return Err(config(format!("window simulation needs a window model, got {:?}", p.mask)));
    };
    check_masks(wb, p, p.mask, MaskKind::Causal)?;
    run(wb, x, p, WindowPlan::new(x.rows(), chunk, r, None)?, opts)
}

/// Exact `Sink { s, r }` simulation: the window calls plus 4 per sink piece.
pub fn sink_simulate(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    chunk: usize,
    opts: &SimOptions,
) -> Result<Matrix> {
    let MaskKind::Sink { s, r } = p.mask else {
        return Err(config(format!("sink simulation needs a sink model, got {:?}", p.mask)));
    };
    check_masks(wb, p, p.mask, MaskKind::Causal)?;
    run(wb, x, p, WindowPlan::new(x.rows(), chunk, r, Some(s))?, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleCapacity, OracleWorkbench};
    use crate::reference::{attention_head, transformer_forward};
    use crate::sim_quadratic::single_head_model;
    use crate::test_support::{max_rel_error, random_matrix, random_model};

    fn bench(m_max: usize, slots: usize) -> OracleWorkbench {
        let cap = OracleCapacity::new(m_max, slots, slots, slots * slots * construct::slot_width(2), MaskKind::Causal)
            .unwrap();
        OracleWorkbench::with_capacity(cap)
    }

    fn head(seed: u64) -> HeadParams {
        HeadParams::new(random_matrix(2, 2, seed), random_matrix(2, 2, seed + 1), random_matrix(2, 2, seed + 2))
            .unwrap()
    }

    fn one_head(x: &Matrix, h: &HeadParams, mask: MaskKind, chunk: usize) -> (Matrix, OracleWorkbench) {
        let mut wb = bench(chunk + 1, 1);
        let p = single_head_model(h, mask);
        let out = match mask {
            MaskKind::Window { .. } => window_simulate(&mut wb, x, &p, chunk, &SimOptions::default()),
            _ => sink_simulate(&mut wb, x, &p, chunk, &SimOptions::default()),
        }
        .unwrap();
        (out, wb)
    }

    #[test]
    fn unit_window_returns_each_value() {
        let (x, h) = (random_matrix(10, 2, 1), head(2));
        let (out, _) = one_head(&x, &h, MaskKind::Window { r: 1 }, 4);
        assert!(out.max_abs_diff(&h.values(&x).unwrap()) < 1e-10);
    }

    #[test]
    fn window_covering_everything_is_causal() {
        let (x, h) = (random_matrix(6, 2, 3), head(4));
        let (out, wb) = one_head(&x, &h, MaskKind::Window { r: 6 }, 7);
        assert!(max_rel_error(&out, &attention_head(&x, &h, MaskKind::Causal).unwrap()) < 1e-10);
        assert_eq!(wb.ledger().total(), 2);
    }

    #[test]
    fn window_matches_reference_with_closed_form_calls() {
        let (x, h) = (random_matrix(32, 2, 5), head(6));
        let mask = MaskKind::Window { r: 4 };
        let (out, wb) = one_head(&x, &h, mask, 8);
        assert!(max_rel_error(&out, &attention_head(&x, &h, mask).unwrap()) < 1e-8);
        let plan = WindowPlan::new(32, 8, 4, None).unwrap();
        assert_eq!(wb.ledger().total(), plan.calls_per_head());
        assert_eq!(plan.calls_per_head(), 30);
    }

    #[test]
    fn sink_matches_reference_with_closed_form_calls() {
        let (x, h) = (random_matrix(32, 2, 7), head(8));
        let mask = MaskKind::Sink { s: 3, r: 4 };
        let (out, wb) = one_head(&x, &h, mask, 8);
        let want = attention_head(&x, &h, mask).unwrap();
        assert!(max_rel_error(&out, &want) < 1e-8);
        let causal = attention_head(&x, &h, MaskKind::Causal).unwrap();
        assert!(out.slice_rows(0..7).max_abs_diff(&causal.slice_rows(0..7)) < 1e-10);
        assert_eq!(wb.ledger().total(), WindowPlan::new(32, 8, 4, Some(3)).unwrap().calls_per_head());
    }

    #[test]
    fn sink_covering_everything_is_causal() {
        let (x, h) = (random_matrix(6, 2, 9), head(10));
        let (out, _) = one_head(&x, &h, MaskKind::Sink { s: 2, r: 4 }, 6);
        assert!(max_rel_error(&out, &attention_head(&x, &h, MaskKind::Causal).unwrap()) < 1e-10);
    }

    #[test]
    fn long_sink_chunks_split_into_pieces() {
        let plan = WindowPlan::new(20, 8, 2, Some(5)).unwrap();
        assert_eq!(plan.sink_pieces(2), vec![7..8]);
        assert_eq!(plan.sink_pieces(8), vec![8..11, 11..14]);
        let (x, h) = (random_matrix(20, 2, 11), head(12));
        let mask = MaskKind::Sink { s: 5, r: 2 };
        let (out, wb) = one_head(&x, &h, mask, 8);
        assert!(max_rel_error(&out, &attention_head(&x, &h, mask).unwrap()) < 1e-8);
        assert_eq!(wb.ledger().total(), plan.calls_per_head());
    }

    #[test]
    fn packed_multi_head_model_matches_reference() {
        for mask in [MaskKind::Window { r: 4 }, MaskKind::Sink { s: 3, r: 4 }] {
            let (x, p) = random_model(32, 4, 2, 2, mask, 13);
            let mut wb = bench(9, 2);
            let out = match mask {
                MaskKind::Window { .. } => window_simulate(&mut wb, &x, &p, 8, &SimOptions::default()),
                _ => sink_simulate(&mut wb, &x, &p, 8, &SimOptions::default()),
            }
            .unwrap();
            assert!(max_rel_error(&out, &transformer_forward(&x, &p).unwrap()) < 1e-8);
            let plan = WindowPlan::new(
                32,
                8,
                4,
                match mask {
                    MaskKind::Sink { s, .. } => Some(s),
                    _ => None,
                },
            )
            .unwrap();
            assert_eq!(wb.ledger().total(), plan.packed_calls(2, 2, 4));
        }
    }

    #[test]
    fn calls_grow_linearly() {
        let c = |n| WindowPlan::new(n, 8, 4, None).unwrap().calls_per_head();
        assert_eq!(c(128) - c(64), 2 * (c(64) - c(32)));
        let c = |n| WindowPlan::new(n, 8, 4, Some(3)).unwrap().calls_per_head();
        assert_eq!(c(128) - c(64), 2 * (c(64) - c(32)));
    }

    #[test]
    fn bad_geometry_is_a_config_error() {
        assert!(WindowPlan::new(30, 8, 4, None).is_err());
        assert!(WindowPlan::new(32, 8, 8, None).is_err());
        assert!(WindowPlan::new(32, 8, 4, Some(5)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn chunks_and_pieces_cover_each_query_once(
            r in 1usize..6,
            extra in 1usize..6,
            t in 0usize..6,
            s in proptest::option::of(1usize..5),
        ) {
            let chunk = r + extra;
            proptest::prop_assume!(s.is_none_or(|s| s + r <= chunk));
            let n = r + t * extra;
            let plan = WindowPlan::new(n, chunk, r, s).unwrap();
            let mut seen = vec![0usize; n];
            for a in plan.chunk_starts() {
                for count in &mut seen[a..a + chunk - r] {
                    *count += 1;
                }
                let mut covered = Vec::new();
                for piece in plan.sink_pieces(a) {
                    proptest::prop_assert!(piece.len() + s.unwrap() <= chunk);
                    covered.extend(piece);
                }
                let want: Vec<usize> = (a.max(plan.first_queries())..a + chunk - r).collect();
                if s.is_some() {
                    proptest::prop_assert_eq!(covered, want);
                }
            }
            for (i, &k) in seen.iter().enumerate() {
                proptest::prop_assert_eq!(k, usize::from(i >= r));
            }
        }
    }
}
