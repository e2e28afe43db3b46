//! The converse direction: many small single-head problems answered by one long attention
//! call.
//!
//! Instance `i` appends tag `u_i` to its queries and `v_i = B 1 + u_i` to its keys. Scores
//! inside an instance are unchanged since `<u_i, v_i> = 0`, while every cross-instance
//! score drops by at least `B^2`, so the shared softmax nearly factorizes per instance.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::oracle::{CallLedger, CallTag};
use crate::reference::{attention_head, HeadParams};
use crate::tensor::{concat, matmul, Axis, MaskKind, Matrix};

/// Largest tag scale; `exp(-B^2)` underflows well before it.
pub const MAX_B: f64 = 40.0;
/// Smallest tag scale returned when the bound holds for any `B`.
pub const MIN_B: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSet {
    /// Tag width, always even.
    pub r: usize,
    pub b_scale: f64,
    /// Query tags in `{0, -B}^r`, each with exactly `r / 2` zeros.
    pub u: Vec<Vec<f64>>,
    /// Key tags `B 1 + u_i`.
    pub v: Vec<Vec<f64>>,
}

pub fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Smallest even width whose half-zero patterns can tag `count` instances.
pub fn tag_width(count: usize) -> usize {
    let mut r = 2;
    while binomial(r, r / 2) < count {
        r += 2;
    }
    r
}

/// The first `count` size-`k` subsets of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize, count: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut current: Vec<usize> = (0..k).collect();
    while out.len() < count {
        out.push(current.clone());
        let Some(pos) = (0..k).rev().find(|&p| current[p] < n - k + p) else { break };
        current[pos] += 1;
        for p in pos + 1..k {
            current[p] = current[p - 1] + 1;
        }
    }
    out
}

pub fn make_tags(count: usize, b_scale: f64) -> TagSet {
    let r = tag_width(count.max(1));
    let u: Vec<Vec<f64>> = subsets(r, r / 2, count)
        .into_iter()
        .map(|zeros| (0..r).map(|k| if zeros.contains(&k) { 0.0 } else { -b_scale }).collect())
        .collect();
    let v = u.iter().map(|ui| ui.iter().map(|x| b_scale + x).collect()).collect();
    TagSet { r, b_scale, u, v }
}

/// The leakage bound `N C exp(2 C^2 - B^2) (1 + exp(C^2)) / M`.
pub fn error_bound(c_bound: f64, n_total: usize, m_len: usize, b: f64) -> f64 {
    let c2 = c_bound * c_bound;
    n_total as f64 * c_bound * (2.0 * c2 - b * b).exp() * (1.0 + c2.exp()) / m_len as f64
}

/// Smallest `B`, rounded up to three decimals, whose leakage bound meets `target_err`.
pub fn choose_b(c_bound: f64, n_total: usize, m_len: usize, target_err: f64) -> Result<f64> {
    if target_err.is_nan() || target_err <= 0.0 || c_bound.is_nan() || c_bound <= 0.0 || m_len == 0 || n_total == 0 {
        return Err(config("choose_b needs positive C, N, M and target error"));
    }
    let c2 = c_bound * c_bound;
    let log_scale = (n_total as f64 * c_bound * (1.0 + c2.exp()) / (m_len as f64 * target_err)).ln();
    let b2 = 2.0 * c2 + log_scale;
    let b = if b2 <= 0.0 { 0.0 } else { b2.sqrt() };
    Ok(((b * 1000.0).ceil() / 1000.0).clamp(MIN_B, MAX_B))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseConfig {
    /// Bound on `max_i |x_i| * |W|_2` over every instance weight.
    pub c_bound: f64,
    pub target_err: f64,
    pub b_scale: f64,
    pub r: usize,
}

impl ReverseConfig {
    pub fn new(c_bound: f64, count: usize, m_len: usize, target_err: f64) -> Result<Self> {
        let b_scale = choose_b(c_bound, count * m_len, m_len, target_err)?;
        Ok(ReverseConfig { c_bound, target_err, b_scale, r: tag_width(count.max(1)) })
    }
}

/// Operation counts of one reverse simulation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReverseAudit {
    pub large_calls: usize,
    pub small_matmuls: usize,
    /// The large call, kept apart from oracle ledgers.
    pub ledger: CallLedger,
}

/// Largest singular value, by power iteration on `W^T W`.
pub fn spectral_norm(w: &Matrix) -> f64 {
    let gram = matmul(&w.transpose(), w).expect("W^T W is square");
    let n = gram.rows();
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let next: Vec<f64> = (0..n).map(|i| gram.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-14 * norm;
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
        if converged {
            break;
        }
    }
    lambda.sqrt()
}

/// `max_i |x_i| * max(|W^Q|, |W^K|, |W^V|)`.
pub fn instance_bound(x: &Matrix, head: &HeadParams) -> f64 {
    let rows = (0..x.rows()).map(|i| x.row_norm(i)).fold(0.0, f64::max);
    let w = [&head.wq, &head.wk, &head.wv].into_iter().map(spectral_norm).fold(0.0, f64::max);
    rows * w
}

fn tagged(m: &Matrix, tag: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols() + tag.len(), |i, j| if j < m.cols() { m[(i, j)] } else { tag[j - m.cols()] })
}

fn selector(parts: usize, which: usize, width: usize) -> Matrix {
    Matrix::from_fn(parts * width, width, |i, j| if i == which * width + j { 1.0 } else { 0.0 })
}

/// Runs every instance through one shared dense attention call of length `sum M_i`.
pub fn reverse_simulate(
    instances: &[(Matrix, HeadParams)],
    cfg: &ReverseConfig,
) -> Result<(Vec<Matrix>, ReverseAudit)> {
    let Some((first, head0)) = instances.first() else {
        return Err(config("reverse simulation needs at least one instance"));
    };
    let (m_len, d) = first.shape();
    let width = head0.output_width();
    if binomial(cfg.r, cfg.r / 2) < instances.len() || !cfg.r.is_multiple_of(2) {
        return Err(config(format!("tag width {} cannot separate {} instances", cfg.r, instances.len())));
    }
    for (k, (x, head)) in instances.iter().enumerate() {
        head.validate()?;
        if x.shape() != (m_len, d) || head.wq.shape() != (d, width) || head.wv.cols() != width {
            return Err(config(format!("instance {k} does not share the first instance's shapes")));
        }
        let c = instance_bound(x, head);
        if c > cfg.c_bound * (1.0 + 1e-12) {
            return Err(config(format!("instance {k} has norm bound {c}, above C = {}", cfg.c_bound)));
        }
    }
    let tags = make_tags(instances.len(), cfg.b_scale);
    let mut audit = ReverseAudit::default();
    let mut rows = Vec::with_capacity(instances.len());
    for (k, (x, head)) in instances.iter().enumerate() {
        let q = matmul(x, &head.wq)?;
        let kk = matmul(x, &head.wk)?;
        let v = matmul(x, &head.wv)?;
        audit.small_matmuls += 3;
        let zeros = vec![0.0; cfg.r];
        rows.push(concat(&[&tagged(&q, &tags.u[k]), &tagged(&kk, &tags.v[k]), &tagged(&v, &zeros)], Axis::Cols)?);
    }
    let refs: Vec<&Matrix> = rows.iter().collect();
    let joined = concat(&refs, Axis::Rows)?;
    let wide = width + cfg.r;
    let large = HeadParams { wq: selector(3, 0, wide), wk: selector(3, 1, wide), wv: selector(3, 2, wide) };
    let out = attention_head(&joined, &large, MaskKind::Dense)?;
    audit.large_calls += 1;
    audit.ledger.begin_round();
    audit.ledger.record(CallTag::LargeCall, joined.rows());
    let outputs =
        (0..instances.len()).map(|k| out.slice_rows(k * m_len..(k + 1) * m_len).slice_cols(0..width)).collect();
    Ok((outputs, audit))
}
