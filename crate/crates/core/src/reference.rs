//! Ground-truth dense transformer evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};
use crate::mlp::MlpSpec;
use crate::tensor::{masked_row_softmax, matmul, Axis, MaskKind, Matrix};

/// One attention head. Query and key projections share a shape; all three share a row count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl HeadParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let h = HeadParams { wq, wk, wv };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wq.shape() != self.wk.shape() || self.wv.rows() != self.wq.rows() {
            return Err(shape(format!(
                "head weights {:?}, {:?}, {:?} do not agree",
                self.wq.shape(),
                self.wk.shape(),
                self.wv.shape()
            )));
        }
        Ok(())
    }

    /// Width of the column slice this head reads.
    pub fn input_width(&self) -> usize {
        self.wq.rows()
    }

    pub fn output_width(&self) -> usize {
        self.wv.cols()
    }

    pub fn queries(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.wq)
    }

    pub fn keys(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.wk)
    }

    pub fn values(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.wv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub mlp: MlpSpec,
    /// When set, the layer MLP reads `[head outputs | layer input]` instead of the head
    /// outputs alone. Only packed oracle calls use it; simulated models never do.
    #[serde(default)]
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub input_mlp: MlpSpec,
    pub layers: Vec<LayerParams>,
    pub mask: MaskKind,
}

impl TransformerParams {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Heads in the first layer.
    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    /// Embedding width seen by the first layer.
    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.iter().map(HeadParams::input_width).sum())
    }

    /// Checks the uniform shape of a model the simulations can handle: `d` divisible by
    /// `H`, square `m x m` heads, every layer MLP mapping `d` back to `d`, no residual wiring.
    pub fn validate_model(&self, input_width: usize) -> Result<()> {
        self.mask.validate()?;
        let Some(first) = self.layers.first() else {
            return Err(config("a model needs at least one layer"));
        };
        let h = first.heads.len();
        if h == 0 {
            return Err(config("a layer needs at least one head"));
        }
        let d = self.input_mlp.output_width(input_width)?;
        if d % h != 0 {
            return Err(config(format!("embedding width {d} is not divisible by {h} heads")));
        }
        let m = d / h;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.residual {
                return Err(config(format!("layer {l} uses residual wiring")));
            }
            if layer.heads.len() != h {
                return Err(config(format!("layer {l} has {} heads, expected {h}", layer.heads.len())));
            }
            for head in &layer.heads {
                head.validate()?;
                if head.wq.shape() != (m, m) || head.wv.shape() != (m, m) {
                    return Err(config(format!("layer {l} has a head that is not {m}x{m}")));
                }
            }
            let out = layer.mlp.output_width(d)?;
            if out != d {
                return Err(config(format!("layer {l} MLP maps width {d} to {out}")));
            }
        }
        Ok(())
    }
}

/// `softmax(mask(x W^Q (x W^K)^T)) x W^V`.
pub fn attention_head(x: &Matrix, h: &HeadParams, mask: MaskKind) -> Result<Matrix> {
    attention_head_scaled(x, h, mask, 1.0)
}

pub fn layer_forward(x: &Matrix, layer: &LayerParams, mask: MaskKind) -> Result<Matrix> {
    layer_forward_scaled(x, layer, mask, 1.0)
}

/// Input MLP, then every layer in order.
pub fn transformer_forward(x: &Matrix, p: &TransformerParams) -> Result<Matrix> {
    transformer_forward_scaled(x, p, 1.0)
}

/// Cross attention: queries from `xq`, keys and values from `xk`.
pub fn cross_attention(xq: &Matrix, xk: &Matrix, h: &HeadParams, mask: MaskKind) -> Result<Matrix> {
    let scores = matmul(&h.queries(xq)?, &h.keys(xk)?.transpose())?;
    matmul(&masked_row_softmax(&scores, mask)?, &h.values(xk)?)
}

/// Same as [`attention_head`] with every score multiplied by `scale`.
pub(crate) fn attention_head_scaled(x: &Matrix, h: &HeadParams, mask: MaskKind, scale: f64) -> Result<Matrix> {
    if x.cols() != h.input_width() {
        return Err(shape(format!("head reads {} columns, input has {}", h.input_width(), x.cols())));
    }
    let mut scores = matmul(&h.queries(x)?, &h.keys(x)?.transpose())?;
    if scale != 1.0 {
        scores = scores.scaled(scale);
    }
    matmul(&masked_row_softmax(&scores, mask)?, &h.values(x)?)
}

pub(crate) fn layer_forward_scaled(x: &Matrix, layer: &LayerParams, mask: MaskKind, scale: f64) -> Result<Matrix> {
    let h = layer.heads.len();
    if h == 0 || !x.cols().is_multiple_of(h) {
        return Err(config(format!("width {} cannot be split across {h} heads", x.cols())));
    }
    let m = x.cols() / h;
    let mut outputs = Vec::with_capacity(h + 1);
    for (k, head) in layer.heads.iter().enumerate() {
        outputs.push(attention_head_scaled(&x.slice_cols(k * m..(k + 1) * m), head, mask, scale)?);
    }
    if layer.residual {
        outputs.push(x.clone());
    }
    let refs: Vec<&Matrix> = outputs.iter().collect();
    let joined = crate::tensor::concat(&refs, Axis::Cols)?;
    layer.mlp.apply(&joined)
}

pub(crate) fn transformer_forward_scaled(x: &Matrix, p: &TransformerParams, scale: f64) -> Result<Matrix> {
    let mut state = p.input_mlp.apply(x)?;
    for layer in &p.layers {
        state = layer_forward_scaled(&state, layer, p.mask, scale)?;
    }
    Ok(state)
}
