//! Provenance audit: proves a simulation's softmax arithmetic came from oracle calls.
//!
//! The audit hands the simulation a tempered oracle that scales every attention score by a
//! factor. A compliant simulation then reproduces the reference model with every query
//! projection scaled by that factor, which differs visibly from the untempered model. Any
//! exponential evaluated on the host escapes the tempering and shows up as a mismatch.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::harness::metrics::{max, row_relative_errors};
use crate::mlp::{mlp_apply, MlpSpec};
use crate::oracle::workbench::{call_tag, plan_calls};
use crate::oracle::{CallLedger, Job, Oracle, OracleCapacity, Workbench, MLP_BUDGET_FACTOR};
use crate::reference::{transformer_forward, TransformerParams};
use crate::sim_quadratic::{expected, simulate_full, simulate_full_causal, SimOptions};
use crate::tensor::{MaskKind, Matrix};

/// Score factor of the audit oracle.
pub const AUDIT_SCALE: f64 = 0.5;
/// Largest relative error accepted against the tempered reference.
pub const MATCH_TOL: f64 = 1e-8;
/// Smallest relative gap required between the tempered and untempered references.
pub const GAP_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceAudit {
    pub score_scale: f64,
    /// Against the reference with scaled query projections.
    pub tempered_error: f64,
    /// Against the untempered reference; must stay large.
    pub untempered_error: f64,
    pub calls: usize,
    pub expected_calls: usize,
    pub passed: bool,
}

/// `p` with every query projection multiplied by `scale`.
pub fn tempered_model(p: &TransformerParams, scale: f64) -> TransformerParams {
    let mut out = p.clone();
    for head in out.layers.iter_mut().flat_map(|l| l.heads.iter_mut()) {
        head.wq = head.wq.scaled(scale);
    }
    out
}

/// Runs the quadratic simulation of `p` on a workbench built around a tempered oracle.
/// `make` receives the tempered oracle and must return the workbench to audit.
pub fn provenance_audit<F>(
    x: &Matrix,
    p: &TransformerParams,
    chunk: usize,
    cap: OracleCapacity,
    opts: &SimOptions,
    make: F,
) -> Result<ProvenanceAudit>
where
    F: FnOnce(Oracle) -> Box<dyn Workbench>,
{
    let mut wb = make(Oracle::tempered(cap, AUDIT_SCALE));
    let y = match p.mask {
        MaskKind::Dense => simulate_full(wb.as_mut(), x, p, chunk, opts)?,
        MaskKind::Causal => simulate_full_causal(wb.as_mut(), x, p, chunk, opts)?,
        other => return Err(config(format!("the audit covers dense and causal models, not {other:?}"))),
    };
    let tempered = transformer_forward(x, &tempered_model(p, AUDIT_SCALE))?;
    let untempered = transformer_forward(x, p)?;
    let gap = max(&row_relative_errors(&tempered, &untempered));
    if gap < GAP_TOL {
        return Err(config(format!("tempering moves this instance by only {gap:e}; the audit cannot tell")));
    }
    let per_call = if opts.pack { cap.slots() } else { 1 };
    let expected_calls = expected::quadratic(x.rows(), chunk, p.heads(), p.depth(), per_call, opts.pure_recombination);
    let tempered_error = max(&row_relative_errors(&y, &tempered));
    let untempered_error = max(&row_relative_errors(&y, &untempered));
    let calls = wb.ledger().total();
    Ok(ProvenanceAudit {
        score_scale: AUDIT_SCALE,
        tempered_error,
        untempered_error,
        calls,
        expected_calls,
        passed: tempered_error <= MATCH_TOL && untempered_error >= GAP_TOL && calls == expected_calls,
    })
}

/// A non-compliant workbench for exercising the audit: it plans and records calls
/// exactly like the compliant one but evaluates every job with host arithmetic, ignoring
/// both the oracle's capacity and its tempering.
#[derive(Debug, Clone)]
pub struct UnrestrictedWorkbench {
    cap: OracleCapacity,
    ledger: CallLedger,
}

impl UnrestrictedWorkbench {
    pub fn new(cap: OracleCapacity) -> Self {
        UnrestrictedWorkbench { cap, ledger: CallLedger::new() }
    }
}

impl Workbench for UnrestrictedWorkbench {
    fn capacity(&self) -> &OracleCapacity {
        &self.cap
    }

    fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    fn begin_round(&mut self) {
        self.ledger.begin_round();
    }

    fn run_round(&mut self, jobs: Vec<Job>, pack: bool) -> Result<Vec<Matrix>> {
        let per_call = if pack { self.cap.slots() } else { 1 };
        for members in plan_calls(&jobs, per_call) {
            self.ledger.record(call_tag(&jobs, &members), jobs[members[0]].rows());
        }
        jobs.iter()
            .map(|job| {
                let out = transformer_forward(&job.input, &job.single_params(self.cap.mask))?;
                Ok(out.slice_rows(job.keep.clone()))
            })
            .collect()
    }

    fn mlp(&mut self, spec: &MlpSpec, x: &Matrix) -> Result<Matrix> {
        mlp_apply(spec, x, MLP_BUDGET_FACTOR * x.cols().max(1).pow(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::oracle::OracleWorkbench;
    use crate::test_support::random_model;

    fn cap(mask: MaskKind) -> OracleCapacity {
        OracleCapacity::new(5, 2, 2, 24, mask).unwrap()
    }

    #[test]
    fn compliant_dense_simulation_passes() {
        let (x, p) = random_model(16, 4, 2, 2, MaskKind::Dense, 1);
        let audit = provenance_audit(&x, &p, 4, cap(MaskKind::Dense), &SimOptions::default(), |o| {
            Box::new(OracleWorkbench::new(o, Exec::Sequential))
        })
        .unwrap();
        assert!(audit.passed, "{audit:?}");
        assert_eq!(audit.calls, 32);
    }

    #[test]
    fn compliant_causal_simulation_passes() {
        let (x, p) = random_model(16, 4, 2, 2, MaskKind::Causal, 2);
        let audit = provenance_audit(&x, &p, 4, cap(MaskKind::Causal), &SimOptions::default(), |o| {
            Box::new(OracleWorkbench::new(o, Exec::Sequential))
        })
        .unwrap();
        assert!(audit.passed, "{audit:?}");
    }

    #[test]
    fn host_arithmetic_is_detected() {
        let (x, p) = random_model(16, 4, 2, 2, MaskKind::Dense, 3);
        let audit = provenance_audit(&x, &p, 4, cap(MaskKind::Dense), &SimOptions::default(), |o| {
            Box::new(UnrestrictedWorkbench::new(o.cap))
        })
        .unwrap();
        assert!(!audit.passed);
        assert_eq!(audit.calls, audit.expected_calls);
        assert!(audit.untempered_error < 1e-10, "{audit:?}");
    }

    #[test]
    fn window_models_are_out_of_scope() {
        let (x, p) = random_model(16, 4, 2, 1, MaskKind::Window { r: 2 }, 4);
        let err = provenance_audit(&x, &p, 4, cap(MaskKind::Causal), &SimOptions::default(), |o| {
            Box::new(OracleWorkbench::new(o, Exec::Sequential))
        });
        assert!(err.is_err());
    }
}
