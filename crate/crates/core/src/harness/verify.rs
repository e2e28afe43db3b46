//! The acceptance suite: every criterion at fixed seeds, with pinned tolerances.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audit::{provenance_audit, UnrestrictedWorkbench};
use crate::construct;
use crate::error::Result;
use crate::exec::Exec;
use crate::oracle::{CallTag, OracleCapacity, OracleWorkbench, Workbench};
use crate::reference::{attention_head, transformer_forward, HeadParams};
use crate::reverse::{instance_bound, make_tags, reverse_simulate, ReverseConfig};
use crate::sim_linear::window::WindowPlan;
use crate::sim_linear::{avg_denominator_estimate, sink_simulate, window_simulate};
use crate::sim_quadratic::{expected, simulate_full, simulate_full_causal, Fault, SimOptions};
use crate::tensor::{matmul, MaskKind, Matrix};

use super::config::{Mode, RunConfig};
use super::instance::{random_model, reverse_instances};
use super::metrics::{max, row_abs_errors, row_relative_errors};
use super::report::{run_mode, CriterionResult, EXACT_TOL};

pub const SEEDS: u64 = 5;
pub const PREFIX_TOL: f64 = 1e-10;
pub const UNBIASED_TOL: f64 = 1e-12;
pub const REVERSE_TARGET: f64 = 1e-6;
pub const PACK_TOL: f64 = 1e-9;
pub const QUADRATIC_SECONDS: f64 = 1.0;
pub const AVERAGE_SECONDS: f64 = 30.0;
/// Largest instance count the tag invariants are checked for.
pub const TAG_COUNTS: usize = 70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub seed: u64,
    pub criteria: Vec<CriterionResult>,
    pub passed: bool,
}

type Check = fn(u64, &SimOptions) -> Result<(bool, String)>;

/// Runs the whole suite. `fault` corrupts the simulations on purpose.
pub fn verify_all(seed: u64, fault: Option<Fault>) -> Verification {
    let opts = SimOptions { fault, ..SimOptions::default() };
    let checks: [(&str, Check); 9] = [
        ("quadratic-exactness", quadratic_exactness),
        ("causal-exactness", causal_exactness),
        ("adaptivity", adaptivity),
        ("average-case", average_case),
        ("estimator-unbiasedness", unbiasedness),
        ("window-sink-exactness", window_sink),
        ("reverse-simulation", reverse),
        ("restriction-audit", restriction_audit),
        ("packing-isolation", packing_isolation),
    ];
    let criteria: Vec<CriterionResult> = checks
        .iter()
        .map(|(name, check)| match check(seed, &opts) {
            Ok((passed, detail)) => CriterionResult::new(name, passed, detail),
            Err(e) => CriterionResult::new(name, false, format!("error: {e}")),
        })
        .collect();
    let passed = criteria.iter().all(|c| c.passed);
    Verification { seed, criteria, passed }
}

const N: usize = 16;
const CHUNK: usize = 4;

fn quadratic_capacity(mask: MaskKind) -> Result<OracleCapacity> {
    OracleCapacity::new(CHUNK + 1, 2, 2, 4 * construct::slot_width(2), mask)
}

fn bench(cap: OracleCapacity) -> OracleWorkbench {
    OracleWorkbench::new(crate::oracle::Oracle::new(cap), Exec::Sequential)
}

fn quadratic_exactness(seed: u64, opts: &SimOptions) -> Result<(bool, String)> {
    let start = Instant::now();
    let want = expected::quadratic(N, CHUNK, 2, 2, 4, false);
    let mut worst = 0.0f64;
    let mut calls = Vec::new();
    for s in seed..seed + SEEDS {
        let (x, p) = random_model(N, 4, 2, 2, MaskKind::Dense, s)?;
        let mut wb = bench(quadratic_capacity(MaskKind::Dense)?);
        let y = simulate_full(&mut wb, &x, &p, CHUNK, opts)?;
        worst = worst.max(max(&row_relative_errors(&y, &transformer_forward(&x, &p)?)));
        calls.push(wb.ledger().total());
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = worst <= EXACT_TOL && calls.iter().all(|&c| c == want) && want == 32 && secs < QUADRATIC_SECONDS;
    Ok((passed, format!("max rel error {worst:.3e}, calls {calls:?} vs {want}, {secs:.3} s")))
}

fn causal_exactness(seed: u64, opts: &SimOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut prefix = 0.0f64;
    for s in seed..seed + SEEDS {
        let (x, p) = random_model(N, 4, 2, 2, MaskKind::Causal, s)?;
        let mut wb = bench(quadratic_capacity(MaskKind::Causal)?);
        let y = simulate_full_causal(&mut wb, &x, &p, CHUNK, opts)?;
        worst = worst.max(max(&row_relative_errors(&y, &transformer_forward(&x, &p)?)));
        // The first token attends only to itself, so its output is the MLP image of its value.
        let alone = transformer_forward(&x.slice_rows(0..1), &p)?;
        prefix = prefix.max(y.slice_rows(0..1).max_abs_diff(&alone));
    }
    Ok((
        worst <= EXACT_TOL && prefix <= PREFIX_TOL,
        format!("max rel error {worst:.3e}, first-row deviation {prefix:.3e}"),
    ))
}

fn adaptivity(seed: u64, opts: &SimOptions) -> Result<(bool, String)> {
    let mut rounds = Vec::new();
    for mask in [MaskKind::Dense, MaskKind::Causal] {
        let (x, p) = random_model(N, 4, 2, 2, mask, seed)?;
        let mut wb = bench(quadratic_capacity(mask)?);
        match mask {
            MaskKind::Dense => simulate_full(&mut wb, &x, &p, CHUNK, opts)?,
            _ => simulate_full_causal(&mut wb, &x, &p, CHUNK, opts)?,
        };
        rounds.push(wb.ledger().rounds);
    }
    Ok((rounds.iter().all(|&r| r <= 6), format!("dense and causal rounds {rounds:?}, at most 6")))
}

fn average_case(seed: u64, _: &SimOptions) -> Result<(bool, String)> {
    let cfg = RunConfig { seed, ..RunConfig::for_mode(Mode::Average) };
    let report = run_mode(&cfg)?;
    let avg = report.average.as_ref().expect("average reports carry a summary");
    let per_step = report.calls_by_tag.get(CallTag::Sample.name()).copied().unwrap_or(0) / 2;
    let passed = report.passed && per_step == cfg.n / cfg.chunk() && report.wall_time_s < AVERAGE_SECONDS;
    Ok((
        passed,
        format!(
            "pass rate {:.2} over {} trials at eps {}, {per_step} calls per step, {:.2} s",
            avg.pass_rate, avg.trials, avg.epsilon, report.wall_time_s
        ),
    ))
}

fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items];
    }
    let mut out = Vec::new();
    for k in 0..items.len() {
        let mut rest = items.clone();
        let first = rest.remove(k);
        for mut tail in permutations(rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

fn unbiasedness(seed: u64, _: &SimOptions) -> Result<(bool, String)> {
    let (x, p) = random_model(4, 2, 1, 1, MaskKind::Dense, seed)?;
    let head = &p.layers[0].heads[0];
    let scores = matmul(&head.queries(&x)?, &head.keys(&x)?.transpose())?;
    let exact: Vec<f64> = (0..4).map(|i| scores.row(i).iter().map(|s| s.exp()).sum()).collect();
    let all = permutations((0..4).collect());
    let mut mean = [0.0; 4];
    for tau in &all {
        let mut wb = bench(OracleCapacity::new(3, 1, 1, construct::slot_width(2), MaskKind::Dense)?);
        for (m, e) in mean.iter_mut().zip(avg_denominator_estimate(&mut wb, &x, head, tau, 2)?) {
            *m += e / all.len() as f64;
        }
    }
    let worst = mean.iter().zip(&exact).map(|(m, a)| (m - a).abs() / a).fold(0.0, f64::max);
    Ok((
        all.len() == 24 && worst <= UNBIASED_TOL,
        format!("{} permutations, max relative deviation {worst:.3e}", all.len()),
    ))
}

fn windowed(
    wb: &mut dyn Workbench,
    x: &Matrix,
    p: &crate::reference::TransformerParams,
    opts: &SimOptions,
) -> Result<Matrix> {
    match p.mask {
        MaskKind::Window { .. } => window_simulate(wb, x, p, 8, opts),
        _ => sink_simulate(wb, x, p, 8, opts),
    }
}

fn window_calls_single_head(n: usize, mask: MaskKind, opts: &SimOptions) -> Result<usize> {
    let (x, p) = random_model(n, 2, 1, 1, mask, 0)?;
    let mut wb = bench(OracleCapacity::new(9, 1, 1, construct::slot_width(2), MaskKind::Causal)?);
    windowed(&mut wb, &x, &p, &SimOptions { pack: false, ..*opts })?;
    Ok(wb.ledger().total())
}

fn window_sink(seed: u64, opts: &SimOptions) -> Result<(bool, String)> {
    let (n, r, s, chunk) = (32, 4, 3, 8);
    let masks = [MaskKind::Window { r }, MaskKind::Sink { s, r }];
    let cap = OracleCapacity::new(chunk + 1, 2, 2, 4 * construct::slot_width(2), MaskKind::Causal)?;
    let mut worst = 0.0f64;
    for seed in seed..seed + SEEDS {
        for mask in masks {
            let (x, p) = random_model(n, 4, 2, 2, mask, seed)?;
            let y = windowed(&mut bench(cap), &x, &p, opts)?;
            worst = worst.max(max(&row_relative_errors(&y, &transformer_forward(&x, &p)?)));
        }
    }
    let chunks = n.div_ceil(chunk - r);
    let window_bound = 6 * chunks;
    let sink_bound = window_bound + 4 * (chunk - r).div_ceil(chunk - s) * chunks;
    let per_head = [window_calls_single_head(n, masks[0], opts)?, window_calls_single_head(n, masks[1], opts)?];
    let mut linear = true;
    let mut ratios = Vec::new();
    for mask in masks {
        let c: Vec<usize> =
            [n, 2 * n, 4 * n].iter().map(|&len| window_calls_single_head(len, mask, opts)).collect::<Result<_>>()?;
        linear &= c[2] - c[1] == 2 * (c[1] - c[0]);
        ratios.push(c[1] as f64 / c[0] as f64);
    }
    let plan_ok = per_head[0] == WindowPlan::new(n, chunk, r, None)?.calls_per_head()
        && per_head[1] == WindowPlan::new(n, chunk, r, Some(s))?.calls_per_head();
    let passed = worst <= EXACT_TOL && per_head[0] <= window_bound && per_head[1] <= sink_bound && linear && plan_ok;
    Ok((
        passed,
        format!(
            "max rel error {worst:.3e}; calls per head {} <= {window_bound} (window), {} <= {sink_bound} (sink); \
             doubling N doubles the increment: {linear} (plain ratios {:.3}, {:.3})",
            per_head[0], per_head[1], ratios[0], ratios[1]
        ),
    ))
}

fn reverse(seed: u64, _: &SimOptions) -> Result<(bool, String)> {
    let instances = reverse_instances(4, 4, 2, seed)?;
    let c = instances.iter().map(|(x, h)| instance_bound(x, h)).fold(0.0, f64::max);
    let cfg = ReverseConfig::new(1.0, 4, 4, REVERSE_TARGET)?;
    let (outputs, audit) = reverse_simulate(&instances, &cfg)?;
    let mut worst = 0.0f64;
    for (y, (x, h)) in outputs.iter().zip(&instances) {
        worst = worst.max(max(&row_abs_errors(y, &attention_head(x, h, MaskKind::Dense)?)));
    }
    let mut tags_ok = true;
    let b = cfg.b_scale;
    for count in 1..=TAG_COUNTS {
        let t = make_tags(count, b);
        for i in 0..count {
            for j in 0..count {
                let dot: f64 = t.u[i].iter().zip(&t.v[j]).map(|(a, b)| a * b).sum();
                tags_ok &= if i == j { dot == 0.0 } else { dot <= -b * b };
            }
        }
    }
    let passed = c <= 1.0 && worst <= REVERSE_TARGET && audit.large_calls == 1 && audit.small_matmuls == 12 && tags_ok;
    Ok((
        passed,
        format!(
            "C = {c:.3}, B = {b}, max abs error {worst:.3e}, {} large call, {} small matmuls, tag invariants to {TAG_COUNTS}: {tags_ok}",
            audit.large_calls, audit.small_matmuls
        ),
    ))
}

fn restriction_audit(seed: u64, opts: &SimOptions) -> Result<(bool, String)> {
    let (x, p) = random_model(N, 4, 2, 2, MaskKind::Dense, seed)?;
    let cap = quadratic_capacity(MaskKind::Dense)?;
    let honest = provenance_audit(&x, &p, CHUNK, cap, opts, |o| Box::new(OracleWorkbench::new(o, Exec::Sequential)))?;
    let cheat = provenance_audit(&x, &p, CHUNK, cap, opts, |o| Box::new(UnrestrictedWorkbench::new(o.cap)))?;
    Ok((
        honest.passed && !cheat.passed,
        format!(
            "compliant: tempered error {:.3e}, passed {}; unrestricted double: tempered error {:.3e}, detected {}",
            honest.tempered_error, honest.passed, cheat.tempered_error, !cheat.passed
        ),
    ))
}

fn packing_isolation(seed: u64, _: &SimOptions) -> Result<(bool, String)> {
    let cap = quadratic_capacity(MaskKind::Dense)?;
    let build = |perturbed: Option<usize>| -> Result<Vec<crate::oracle::Job>> {
        (0..4)
            .map(|k| {
                let (x, p) = random_model(CHUNK, 2, 1, 1, MaskKind::Dense, seed * 10 + k as u64)?;
                let x = if perturbed == Some(k) { x.map(|v| v + 0.25) } else { x };
                let head: &HeadParams = &p.layers[0].heads[0];
                construct::cross_ratio(CallTag::Ratio, &x, &x.map(|v| -v), head)
            })
            .collect()
    };
    let jobs = build(None)?;
    let mut packed_wb = bench(cap);
    let packed = packed_wb.run_round(jobs.clone(), true)?;
    let alone = bench(cap).run_round(jobs, false)?;
    let deviation = packed.iter().zip(&alone).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    let mut isolated = true;
    for victim in 0..4 {
        let after = bench(cap).run_round(build(Some(victim))?, true)?;
        for k in 0..4 {
            isolated &= (after[k] == packed[k]) != (k == victim);
        }
    }
    let one_call = packed_wb.ledger().total() == 1;
    Ok((
        deviation <= PACK_TOL && isolated && one_call,
        format!(
            "4 instances in {} call, max slot deviation {deviation:.3e}, isolation {isolated}",
            packed_wb.ledger().total()
        ),
    ))
}
