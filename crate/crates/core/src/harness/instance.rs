//! Deterministic random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::mlp::{MlpSpec, MlpStep};
use crate::reference::{HeadParams, LayerParams, TransformerParams};
use crate::rng::{self, Purpose};
use crate::sim_linear::{check_boundedness, BoundednessProfile, BoundednessReport};
use crate::tensor::{MaskKind, Matrix};

use super::config::{Mode, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Matrix,
    pub params: TransformerParams,
    /// Set for average-case instances.
    pub boundedness: Option<BoundednessReport>,
}

fn uniform(g: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * g.random_range(-1.0..1.0))
}

fn random_head(g: &mut ChaCha8Rng, m: usize) -> HeadParams {
    HeadParams { wq: uniform(g, m, m, 1.0), wk: uniform(g, m, m, 1.0), wv: uniform(g, m, m, 1.0) }
}

/// A near-identity affine layer MLP, so layer outputs stay at input scale.
fn random_layer_mlp(g: &mut ChaCha8Rng, d: usize) -> MlpSpec {
    let noise = uniform(g, d, d, 0.2);
    let weight = Matrix::from_fn(d, d, |i, j| noise[(i, j)] + if i == j { 1.0 } else { 0.0 });
    let bias = (0..d).map(|_| 0.1 * g.random_range(-1.0..1.0)).collect();
    MlpSpec::new(vec![MlpStep::Affine { weight, bias }])
}

/// Inputs and every head weight uniform in `[-1, 1]`, layer MLPs near the identity.
pub fn random_model(
    n: usize,
    d: usize,
    h: usize,
    l: usize,
    mask: MaskKind,
    seed: u64,
) -> Result<(Matrix, TransformerParams)> {
    if h == 0 || !d.is_multiple_of(h) {
        return Err(config(format!("d = {d} must be divisible by h = {h}")));
    }
    let m = d / h;
    let x = uniform(&mut rng::stream(seed, Purpose::Instance, 0, 0), n, d, 1.0);
    let layers = (0..l)
        .map(|layer| {
            let heads =
                (0..h).map(|k| random_head(&mut rng::stream(seed, Purpose::Instance, layer + 1, k + 1), m)).collect();
            let mlp = random_layer_mlp(&mut rng::stream(seed, Purpose::Instance, layer + 1, 0), d);
            LayerParams { heads, mlp, residual: false }
        })
        .collect();
    let p = TransformerParams { input_mlp: MlpSpec::identity(), layers, mask };
    p.validate_model(d)?;
    Ok((x, p))
}

/// Largest score magnitude allowed in bounded instances.
pub const BOUNDED_SCORE: f64 = 0.5;

/// A single dense head meeting the average-case hypotheses: every score has magnitude at
/// most 0.5 and values cluster around a shared base vector. Rows are `(1, xi)`.
pub fn bounded_model(n: usize, d: usize, seed: u64) -> Result<(Matrix, TransformerParams)> {
    if d < 2 {
        return Err(config("bounded instances need d >= 2"));
    }
    let mut g = rng::stream(seed, Purpose::Instance, 0, 0);
    let x = Matrix::from_fn(n, d, |_, j| if j == 0 { 1.0 } else { g.random_range(-1.0..1.0) });
    let mut g = rng::stream(seed, Purpose::Instance, 1, 1);
    let mut head = random_head(&mut g, d);
    let base: Vec<f64> = (0..d).map(|_| g.random_range(0.5..1.0)).collect();
    head.wv = Matrix::from_fn(d, d, |i, j| if i == 0 { base[j] } else { 0.1 * g.random_range(-1.0..1.0) });
    let scores = crate::tensor::matmul(&head.queries(&x)?, &head.keys(&x)?.transpose())?;
    let peak = scores.data().iter().fold(0.0f64, |a, s| a.max(s.abs()));
    if peak > 0.0 {
        let f = (BOUNDED_SCORE / peak).sqrt();
        head.wq = head.wq.scaled(f);
        head.wk = head.wk.scaled(f);
    }
    let p = TransformerParams {
        input_mlp: MlpSpec::identity(),
        layers: vec![LayerParams { heads: vec![head], mlp: MlpSpec::identity(), residual: false }],
        mask: MaskKind::Dense,
    };
    Ok((x, p))
}

/// `count` independent single-head problems of length `m`, scaled so every row has norm
/// at most 1 and every weight spectral norm at most 1.
pub fn reverse_instances(count: usize, m: usize, d: usize, seed: u64) -> Result<Vec<(Matrix, HeadParams)>> {
    if count == 0 || m == 0 || d == 0 {
        return Err(config("reverse instances need positive count, length and width"));
    }
    Ok((0..count)
        .map(|k| {
            let mut g = rng::stream(seed, Purpose::Instance, 0, k);
            let mut x = uniform(&mut g, m, d, 1.0);
            let peak = (0..m).map(|i| x.row_norm(i)).fold(0.0, f64::max);
            if peak > 1.0 {
                x = x.scaled(1.0 / peak);
            }
            let mut head = random_head(&mut g, d);
            for w in [&mut head.wq, &mut head.wk, &mut head.wv] {
                let norm = crate::reverse::spectral_norm(w);
                if norm > 1.0 {
                    *w = w.scaled(1.0 / norm);
                }
            }
            (x, head)
        })
        .collect())
}

/// The instance a config runs on. Average-case instances carry their boundedness report.
pub fn generate_instance(cfg: &RunConfig) -> Result<Instance> {
    if cfg.mode == Mode::Average {
        let (x, params) = bounded_model(cfg.n, cfg.d, cfg.seed)?;
        let profile = BoundednessProfile::new(BOUNDED_SCORE.exp(), None)?;
        let report = check_boundedness(&x, &params.layers[0].heads[0], &profile)?;
        return Ok(Instance { x, params, boundedness: Some(report) });
    }
    let (x, params) = random_model(cfg.n, cfg.d, cfg.h, cfg.l, cfg.model_mask(), cfg.seed)?;
    Ok(Instance { x, params, boundedness: None })
}
