//! The length-capped small-transformer oracle and its call ledger.

pub(crate) mod workbench;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use workbench::{Job, OracleWorkbench, Workbench};

use crate::error::{config, restriction, Result};
use crate::mlp::{MlpSpec, MlpStep};
use crate::reference::{transformer_forward_scaled, HeadParams, LayerParams, TransformerParams};
use crate::tensor::{MaskKind, Matrix};

/// Per-token operations an MLP may spend, as a multiple of the squared embedding width.
pub const MLP_BUDGET_FACTOR: usize = 16;

/// Constants a single padding edit may add to a matrix of width `w`.
pub fn pad_budget(width: usize) -> usize {
    width.max(1).pow(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCapacity {
    pub m_max: usize,
    pub l_small: usize,
    pub h_small: usize,
    pub d_small: usize,
    pub mask: MaskKind,
}

impl OracleCapacity {
    pub fn new(m_max: usize, l_small: usize, h_small: usize, d_small: usize, mask: MaskKind) -> Result<Self> {
        if m_max == 0 || l_small == 0 || h_small == 0 || d_small == 0 {
            return Err(config("oracle length, layers, heads, and width must all be positive"));
        }
        if !d_small.is_multiple_of(h_small) {
            return Err(config(format!("oracle width {d_small} is not divisible by {h_small} heads")));
        }
        mask.validate()?;
        Ok(OracleCapacity { m_max, l_small, h_small, d_small, mask })
    }

    /// Independent single-head instances one call can hold.
    pub fn slots(&self) -> usize {
        self.h_small * self.l_small
    }

    pub fn mlp_budget(&self) -> usize {
        MLP_BUDGET_FACTOR * self.d_small * self.d_small
    }

    /// Checks `input` and `params` against this capacity without evaluating anything.
    pub fn check(&self, input: &Matrix, params: &TransformerParams) -> Result<()> {
        if input.rows() == 0 || input.rows() > self.m_max {
            return Err(restriction(format!(
                "input of length {} exceeds the oracle limit {}",
                input.rows(),
                self.m_max
            )));
        }
        if params.mask != self.mask {
            return Err(restriction(format!(
                "oracle runs {:?} attention, call asked for {:?}",
                self.mask, params.mask
            )));
        }
        if params.layers.is_empty() || params.layers.len() > self.l_small {
            return Err(restriction(format!("{} layers requested, oracle has {}", params.layers.len(), self.l_small)));
        }
        let mut width = self.check_mlp(&params.input_mlp, input.cols(), "input")?;
        for (l, layer) in params.layers.iter().enumerate() {
            let h = layer.heads.len();
            if h == 0 || h > self.h_small {
                return Err(restriction(format!("layer {l} uses {h} heads, oracle has {}", self.h_small)));
            }
            if width > self.d_small {
                return Err(restriction(format!(
                    "layer {l} input width {width} exceeds oracle width {}",
                    self.d_small
                )));
            }
            if width % h != 0 {
                return Err(restriction(format!("layer {l} width {width} does not split over {h} heads")));
            }
            for head in &layer.heads {
                head.validate()?;
                if head.input_width() != width / h {
                    return Err(restriction(format!(
                        "layer {l} head reads {} columns of a {} slice",
                        head.input_width(),
                        width / h
                    )));
                }
            }
            let attn: usize = layer.heads.iter().map(HeadParams::output_width).sum();
            let mlp_in = attn + if layer.residual { width } else { 0 };
            width = self.check_mlp(&layer.mlp, mlp_in, "layer")?;
        }
        if width > self.d_small {
            return Err(restriction(format!("output width {width} exceeds oracle width {}", self.d_small)));
        }
        Ok(())
    }

    fn check_mlp(&self, spec: &MlpSpec, in_width: usize, what: &str) -> Result<usize> {
        let out = spec.output_width(in_width)?;
        let cost = spec.cost_per_token(in_width)?;
        if cost > self.mlp_budget() {
            return Err(restriction(format!(
                "{what} MLP needs {cost} operations per token, oracle budget is {}",
                self.mlp_budget()
            )));
        }
        if out > self.d_small {
            return Err(restriction(format!("{what} MLP widens to {out}, oracle width is {}", self.d_small)));
        }
        Ok(out)
    }
}

/// What an oracle call computes, for per-component accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallTag {
    Denominator,
    Ratio,
    Prefix,
    Suffix,
    Sample,
    Sum,
    /// A packed call holding jobs with different tags.
    Pack,
    LargeCall,
}

impl CallTag {
    pub fn name(self) -> &'static str {
        match self {
            CallTag::Denominator => "denominator",
            CallTag::Ratio => "ratio",
            CallTag::Prefix => "prefix",
            CallTag::Suffix => "suffix",
            CallTag::Sample => "sample",
            CallTag::Sum => "sum",
            CallTag::Pack => "pack",
            CallTag::LargeCall => "large-call",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub round: usize,
    pub tag: CallTag,
    pub input_len: usize,
}

/// Every oracle call, grouped into adaptivity rounds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub rounds: usize,
    pub calls: Vec<CallRecord>,
}

impl CallLedger {
    pub fn new() -> Self {
        CallLedger::default()
    }

    /// Starts a new round; later calls may depend on everything recorded so far.
    pub fn begin_round(&mut self) {
        self.rounds += 1;
    }

    pub fn record(&mut self, tag: CallTag, input_len: usize) {
        self.calls.push(CallRecord { round: self.rounds, tag, input_len });
    }

    pub fn total(&self) -> usize {
        self.calls.len()
    }

    pub fn count(&self, tag: CallTag) -> usize {
        self.calls.iter().filter(|c| c.tag == tag).count()
    }

    pub fn by_tag(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for c in &self.calls {
            *out.entry(c.tag.name().to_string()).or_insert(0) += 1;
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ledger serializes")
    }
}

/// Starts a new adaptivity round on `ledger`.
pub fn begin_round(ledger: &mut CallLedger) {
    ledger.begin_round();
}

/// The oracle itself: capacity checks plus the reference forward pass.
///
/// `score_scale` multiplies every attention score. It is 1 except in the provenance
/// audit, which uses a tempered oracle to check that all softmax arithmetic flows
/// through oracle calls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oracle {
    pub cap: OracleCapacity,
    pub score_scale: f64,
}

impl Oracle {
    pub fn new(cap: OracleCapacity) -> Self {
        Oracle { cap, score_scale: 1.0 }
    }

    pub fn tempered(cap: OracleCapacity, score_scale: f64) -> Self {
        Oracle { cap, score_scale }
    }

    /// Evaluates one call without recording it.
    pub fn evaluate(&self, input: &Matrix, params: &TransformerParams) -> Result<Matrix> {
        self.cap.check(input, params)?;
        transformer_forward_scaled(input, params, self.score_scale)
    }

    pub fn call(
        &self,
        ledger: &mut CallLedger,
        tag: CallTag,
        input: &Matrix,
        params: &TransformerParams,
    ) -> Result<Matrix> {
        let out = self.evaluate(input, params)?;
        ledger.record(tag, input.rows());
        Ok(out)
    }
}

/// One recorded call to an untempered oracle of capacity `cap`.
pub fn oracle_call(
    ledger: &mut CallLedger,
    tag: CallTag,
    input: &Matrix,
    params: &TransformerParams,
    cap: &OracleCapacity,
) -> Result<Matrix> {
    Oracle::new(*cap).call(ledger, tag, input, params)
}

/// Column sums of `rows` in one oracle call.
///
/// Query and key projections read a constant 1 appended by the input MLP, so every score
/// is equal and attention averages the value rows; the value projection multiplies by the
/// row count to turn the average into a sum. Under a causal oracle the last token sees
/// every row, so its output is read.
pub fn sum_via_oracle(ledger: &mut CallLedger, rows: &Matrix, cap: &OracleCapacity) -> Result<Vec<f64>> {
    let job = sum_job(rows, MlpSpec::identity(), MlpSpec::identity());
    let params = job.single_params(cap.mask);
    let out = oracle_call(ledger, CallTag::Sum, &job.input, &params, cap)?;
    Ok(out.row(out.rows() - 1).to_vec())
}

/// The summing arrangement around optional row pre- and post-processing.
pub(crate) fn sum_job(rows: &Matrix, pre: MlpSpec, post: MlpSpec) -> Job {
    let n = rows.rows();
    let width = pre.output_width(rows.cols()).expect("pre-processing fits the rows");
    let ones = Matrix::from_fn(width + 1, 1, |i, _| if i == width { 1.0 } else { 0.0 });
    let wv = Matrix::from_fn(width + 1, width, |i, j| if i == j { n as f64 } else { 0.0 });
    let mut input_mlp = pre;
    input_mlp.steps.push(MlpStep::PadConst(vec![1.0]));
    Job {
        tag: CallTag::Sum,
        input: rows.clone(),
        input_mlp,
        head: HeadParams { wq: ones.clone(), wk: ones, wv },
        output_mlp: post,
        keep: n - 1..n,
    }
}

impl Job {
    /// The unpacked arrangement: one layer, one head.
    pub fn single_params(&self, mask: MaskKind) -> TransformerParams {
        TransformerParams {
            input_mlp: self.input_mlp.clone(),
            layers: vec![LayerParams { heads: vec![self.head.clone()], mlp: self.output_mlp.clone(), residual: false }],
            mask,
        }
    }
}
