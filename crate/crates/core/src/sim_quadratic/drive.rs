//! The per-layer round structure shared by every simulation.

use crate::error::{config, Result};
use crate::mlp::{MlpSpec, MlpStep};
use crate::oracle::{sum_job, Job, Workbench};
use crate::reference::{HeadParams, TransformerParams};
use crate::tensor::{concat, Axis, Matrix};

/// Faults injected on purpose to prove the verifier notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Recombine each part's ratio with the weight of the mirrored part.
    SwapRecombineWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Fill every call with up to `H' L'` independent instances.
    pub pack: bool,
    /// Route recombination sums through the oracle instead of a host MLP step.
    pub pure_recombination: bool,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { pack: true, pure_recombination: false, fault: None }
    }
}

/// Per-row weighted average of block ratios: `sum_k s_k a_k r_k / sum_k s_k a_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recombination {
    /// `N x K` part weights.
    pub weights: Matrix,
    /// `K` ratio matrices, each `N x m`.
    pub ratios: Vec<Matrix>,
    pub signs: Vec<f64>,
}

impl Recombination {
    pub fn table(&self) -> Result<Matrix> {
        let mut parts = vec![&self.weights];
        parts.extend(self.ratios.iter());
        concat(&parts, Axis::Cols)
    }

    pub fn spec(&self) -> MlpSpec {
        let width = self.ratios.first().map_or(0, Matrix::cols);
        MlpSpec::new(vec![MlpStep::WeightedRatio { signs: self.signs.clone(), width }])
    }

    fn with_fault(mut self, fault: Option<Fault>) -> Self {
        if fault == Some(Fault::SwapRecombineWeights) {
            let k = self.weights.cols();
            let mirrored: Vec<usize> = (0..k).rev().collect();
            self.weights = self.weights.select_cols(&mirrored);
        }
        self
    }

    /// One summing job per row: the job's rows are the parts `[s_k a_k | s_k a_k r_k]`
    /// after its input MLP, and its output MLP divides the sums.
    fn sum_jobs(&self) -> Vec<Job> {
        let (n, k) = self.weights.shape();
        let width = self.ratios.first().map_or(0, Matrix::cols);
        (0..n)
            .map(|i| {
                let rows = Matrix::from_fn(k, 1 + width, |part, c| {
                    if c == 0 {
                        self.signs[part] * self.weights[(i, part)]
                    } else {
                        self.ratios[part][(i, c - 1)]
                    }
                });
                sum_job(
                    &rows,
                    MlpSpec::new(vec![MlpStep::ScaleCols { cols: 1..1 + width, by: 0 }]),
                    MlpSpec::new(vec![
                        MlpStep::DivideCols { cols: 1..1 + width, by: 0 },
                        MlpStep::SelectCols((1..1 + width).collect()),
                    ]),
                )
            })
            .collect()
    }
}

pub(crate) enum Assembled {
    Output(Matrix),
    Recombine(Recombination),
}

/// One simulation algorithm, expressed as the jobs of its two oracle rounds per head.
pub(crate) trait Scheme {
    fn denominators(&self, layer: usize, head: usize, x: &Matrix, params: &HeadParams) -> Result<Vec<Job>>;

    fn ratios(&self, layer: usize, head: usize, x: &Matrix, params: &HeadParams) -> Result<Vec<Job>>;

    fn assemble(&mut self, layer: usize, head: usize, den: Vec<Matrix>, rat: Vec<Matrix>) -> Result<Assembled>;
}

/// Checks that the oracle can hold `width`-column slots at the requested packing.
pub(crate) fn check_slot_width(wb: &dyn Workbench, width: usize, pack: bool) -> Result<()> {
    let cap = wb.capacity();
    let per_call = if pack { cap.slots() } else { 1 };
    let need = width * per_call;
    if cap.d_small < need {
        return Err(config(format!(
            "oracle width {} is below the {need} columns needed for {per_call} slots of width {width}",
            cap.d_small
        )));
    }
    Ok(())
}

fn split<T>(mut items: Vec<T>, counts: &[usize]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(counts.len());
    for &c in counts.iter().rev() {
        out.push(items.split_off(items.len() - c));
    }
    out.reverse();
    out
}

fn round<F>(wb: &mut dyn Workbench, heads: usize, pack: bool, mut build: F) -> Result<Vec<Vec<Matrix>>>
where
    F: FnMut(usize) -> Result<Vec<Job>>,
{
    wb.begin_round();
    let mut jobs = Vec::new();
    let mut counts = Vec::with_capacity(heads);
    for k in 0..heads {
        let mine = build(k)?;
        counts.push(mine.len());
        jobs.extend(mine);
    }
    Ok(split(wb.run_round(jobs, pack)?, &counts))
}

/// Runs `p` on `x`: input MLP, then per layer a denominator round, a ratio round, and a
/// recombination round whenever any head needs one, then the layer MLP.
pub(crate) fn run_layers<S: Scheme>(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &TransformerParams,
    opts: &SimOptions,
    scheme: &mut S,
) -> Result<Matrix> {
    p.validate_model(x.cols())?;
    let mut state = wb.mlp(&p.input_mlp, x)?;
    for (l, layer) in p.layers.iter().enumerate() {
        let h = layer.heads.len();
        let m = state.cols() / h;
        let slices: Vec<Matrix> = (0..h).map(|k| state.slice_cols(k * m..(k + 1) * m)).collect();
        let den = round(wb, h, opts.pack, |k| scheme.denominators(l, k, &slices[k], &layer.heads[k]))?;
        let rat = round(wb, h, opts.pack, |k| scheme.ratios(l, k, &slices[k], &layer.heads[k]))?;

        let mut outputs: Vec<Option<Matrix>> = Vec::with_capacity(h);
        let mut pending = Vec::new();
        for (k, (d, r)) in den.into_iter().zip(rat).enumerate() {
            match scheme.assemble(l, k, d, r)? {
                Assembled::Output(o) => outputs.push(Some(o)),
                Assembled::Recombine(rc) => {
                    pending.push((k, rc.with_fault(opts.fault)));
                    outputs.push(None);
                }
            }
        }
        if !pending.is_empty() {
            wb.begin_round();
            if opts.pure_recombination {
                let mut jobs = Vec::new();
                for (_, rc) in &pending {
                    let parts = rc.weights.cols();
                    if parts > wb.capacity().m_max {
                        return Err(config(format!(
                            "oracle recombination sums {parts} parts, above the oracle length {}",
                            wb.capacity().m_max
                        )));
                    }
                    jobs.extend(rc.sum_jobs());
                }
                let rows = wb.run_round(jobs, opts.pack)?;
                let counts: Vec<usize> = pending.iter().map(|(_, rc)| rc.weights.rows()).collect();
                for ((k, _), head_rows) in pending.iter().zip(split(rows, &counts)) {
                    let refs: Vec<&Matrix> = head_rows.iter().collect();
                    outputs[*k] = Some(concat(&refs, Axis::Rows)?);
                }
            } else {
                for (k, rc) in &pending {
                    outputs[*k] = Some(wb.mlp(&rc.spec(), &rc.table()?)?);
                }
            }
        }
        let outputs: Vec<Matrix> = outputs.into_iter().map(|o| o.expect("every head assembled")).collect();
        let refs: Vec<&Matrix> = outputs.iter().collect();
        state = wb.mlp(&layer.mlp, &concat(&refs, Axis::Cols)?)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::mlp_apply;

    #[test]
    fn single_part_returns_its_ratio() {
        let r = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let rc =
            Recombination { weights: Matrix::from_rows(&[[0.3], [7.0]]), ratios: vec![r.clone()], signs: vec![1.0] };
        let out = mlp_apply(&rc.spec(), &rc.table().unwrap(), 1000).unwrap();
        assert!(out.max_abs_diff(&r) < 1e-15);
    }

    #[test]
    fn fault_mirrors_weights() {
        let rc = Recombination {
            weights: Matrix::from_rows(&[[1.0, 3.0]]),
            ratios: vec![Matrix::from_rows(&[[2.0]]), Matrix::from_rows(&[[6.0]])],
            signs: vec![1.0, 1.0],
        };
        let good = rc.spec().apply(&rc.table().unwrap()).unwrap();
        let bad = rc.clone().with_fault(Some(Fault::SwapRecombineWeights));
        let bad = bad.spec().apply(&bad.table().unwrap()).unwrap();
        assert_eq!(good[(0, 0)], 5.0);
        assert_eq!(bad[(0, 0)], 3.0);
    }

    #[test]
    fn split_follows_counts() {
        let parts = split(vec![1, 2, 3, 4, 5], &[2, 0, 3]);
        assert_eq!(parts, vec![vec![1, 2], vec![], vec![3, 4, 5]]);
    }
}
