use std::ops::Range;

use crate::error::Result;
use crate::exec::Exec;
use crate::mlp::{mlp_apply, MlpSpec};
use crate::oracle::{CallLedger, CallTag, Oracle, OracleCapacity, MLP_BUDGET_FACTOR};
use crate::reference::HeadParams;
use crate::sim_quadratic::pack::pack_instances;
use crate::tensor::Matrix;

/// One single-head oracle instance: host-arranged rows, the index-aware input MLP that
/// shapes them, the head, and the output MLP. `keep` selects the output rows returned.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub tag: CallTag,
    pub input: Matrix,
    pub input_mlp: MlpSpec,
    pub head: HeadParams,
    pub output_mlp: MlpSpec,
    pub keep: Range<usize>,
}

impl Job {
    pub fn rows(&self) -> usize {
        self.input.rows()
    }

    /// Width after the input MLP.
    pub fn slot_width(&self) -> Result<usize> {
        self.input_mlp.output_width(self.input.cols())
    }

    pub fn result_width(&self) -> Result<usize> {
        self.output_mlp.output_width(self.head.output_width())
    }
}

/// Everything a simulation may do on the host.
///
/// There is no softmax and no exponential here: attention arithmetic is only reachable
/// through [`Workbench::run_round`], which turns jobs into oracle calls. Data movement
/// (selection, concatenation, constant padding) uses the `tensor` kernels directly.
pub trait Workbench {
    fn capacity(&self) -> &OracleCapacity;

    fn ledger(&self) -> &CallLedger;

    fn begin_round(&mut self);

    /// Runs mutually independent jobs as oracle calls, up to `capacity().slots()` jobs
    /// per call when `pack` is set, and returns each job's kept output rows in order.
    fn run_round(&mut self, jobs: Vec<Job>, pack: bool) -> Result<Vec<Matrix>>;

    /// An MLP-equivalent host step, held to the same per-token budget rule as oracle MLPs.
    fn mlp(&mut self, spec: &MlpSpec, x: &Matrix) -> Result<Matrix>;
}

/// The compliant workbench: every job reaches the oracle and lands in the ledger.
#[derive(Debug, Clone)]
pub struct OracleWorkbench {
    oracle: Oracle,
    ledger: CallLedger,
    exec: Exec,
}

impl OracleWorkbench {
    pub fn new(oracle: Oracle, exec: Exec) -> Self {
        OracleWorkbench { oracle, ledger: CallLedger::new(), exec }
    }

    pub fn with_capacity(cap: OracleCapacity) -> Self {
        OracleWorkbench::new(Oracle::new(cap), Exec::default())
    }

    pub fn into_ledger(self) -> CallLedger {
        self.ledger
    }
}

/// Groups jobs into calls: same-length jobs share a call, at most `per_call` at a time,
/// in first-appearance order. Returns job indices per call.
pub(crate) fn plan_calls(jobs: &[Job], per_call: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, job) in jobs.iter().enumerate() {
        match groups.iter_mut().find(|(rows, _)| *rows == job.rows()) {
            Some((_, members)) => members.push(k),
            None => groups.push((job.rows(), vec![k])),
        }
    }
    groups
        .into_iter()
        .flat_map(|(_, members)| members.chunks(per_call.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

pub(crate) fn call_tag(jobs: &[Job], members: &[usize]) -> CallTag {
    let first = jobs[members[0]].tag;
    if members.iter().all(|&k| jobs[k].tag == first) {
        first
    } else {
        CallTag::Pack
    }
}

impl Workbench for OracleWorkbench {
    fn capacity(&self) -> &OracleCapacity {
        &self.oracle.cap
    }

    fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    fn begin_round(&mut self) {
        self.ledger.begin_round();
    }

    fn run_round(&mut self, jobs: Vec<Job>, pack: bool) -> Result<Vec<Matrix>> {
        let per_call = if pack { self.oracle.cap.slots() } else { 1 };
        let calls = plan_calls(&jobs, per_call);
        let oracle = self.oracle;
        let results = self.exec.map(&calls, |members| -> Result<Vec<Matrix>> {
            let group: Vec<Job> = members.iter().map(|&k| jobs[k].clone()).collect();
            let packed = pack_instances(&group, &oracle.cap)?;
            let out = oracle.evaluate(&packed.input, &packed.params)?;
            Ok(packed.unpack(&out))
        });
        let mut outputs: Vec<Option<Matrix>> = vec![None; jobs.len()];
        for (members, result) in calls.iter().zip(results) {
            let result = result?;
            self.ledger.record(call_tag(&jobs, members), jobs[members[0]].rows());
            for (&k, out) in members.iter().zip(result) {
                outputs[k] = Some(out);
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("every job was planned")).collect())
    }

    fn mlp(&mut self, spec: &MlpSpec, x: &Matrix) -> Result<Matrix> {
        mlp_apply(spec, x, MLP_BUDGET_FACTOR * x.cols().max(1).pow(2))
    }
}
