//! Packing independent single-head instances into one multi-head, multi-layer oracle call.
//!
//! Instance `k` occupies slot `(h, l)` with `h = k % H'` and `l = k / H'`: layer `l`'s head
//! `h` computes it. Every slot is `w` columns wide, where `w` is the widest instance after
//! its input MLP, and head `h` reads the slots `(h, 0..L)` as one contiguous partition.
//! With more than one layer, each layer MLP also reads the layer input and writes the
//! slot result over the slot `(h, l)` columns, leaving every other column untouched.

use std::ops::Range;

use crate::error::{restriction, shape, Result};
use crate::mlp::{MlpSpec, MlpStep};
use crate::oracle::{Job, OracleCapacity};
use crate::reference::{HeadParams, LayerParams, TransformerParams};
use crate::tensor::{concat, Axis, Matrix};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    col: usize,
    width: usize,
    keep: Range<usize>,
}

/// A packed oracle call and the map back to per-instance outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    pub input: Matrix,
    pub params: TransformerParams,
    slots: Vec<Slot>,
}

impl Packed {
    /// Splits the call output into per-instance results, in instance order.
    pub fn unpack(&self, output: &Matrix) -> Vec<Matrix> {
        self.slots.iter().map(|s| output.slice_cols(s.col..s.col + s.width).slice_rows(s.keep.clone())).collect()
    }
}

fn pad_rows(m: &Matrix, rows: usize, offset: usize) -> Matrix {
    Matrix::from_fn(rows, m.cols(), |i, j| if i >= offset && i < offset + m.rows() { m[(i - offset, j)] } else { 0.0 })
}

/// The instance head embedded at row `offset` of a partition `rows` wide.
fn embed_head(h: &HeadParams, rows: usize, offset: usize) -> HeadParams {
    HeadParams {
        wq: pad_rows(&h.wq, rows, offset),
        wk: pad_rows(&h.wk, rows, offset),
        wv: pad_rows(&h.wv, rows, offset),
    }
}

fn idle_head(rows: usize) -> HeadParams {
    HeadParams { wq: Matrix::zeros(rows, 1), wk: Matrix::zeros(rows, 1), wv: Matrix::zeros(rows, 1) }
}

fn widen(spec: &MlpSpec, from: usize, to: usize) -> MlpSpec {
    if from == to {
        spec.clone()
    } else {
        spec.clone().then(MlpStep::PadConst(vec![0.0; to - from]))
    }
}

pub fn pack_instances(jobs: &[Job], cap: &OracleCapacity) -> Result<Packed> {
    let n = jobs.len();
    if n == 0 || n > cap.slots() {
        return Err(restriction(format!("{n} instances do not fit {} oracle slots", cap.slots())));
    }
    let rows = jobs[0].rows();
    if jobs.iter().any(|j| j.rows() != rows) {
        return Err(shape("packed instances must share a length"));
    }
    if n == 1 {
        let job = &jobs[0];
        return Ok(Packed {
            input: job.input.clone(),
            params: job.single_params(cap.mask),
            slots: vec![Slot { col: 0, width: job.result_width()?, keep: job.keep.clone() }],
        });
    }
    let slot_widths = jobs.iter().map(Job::slot_width).collect::<Result<Vec<_>>>()?;
    let result_widths = jobs.iter().map(Job::result_width).collect::<Result<Vec<_>>>()?;
    let w = *slot_widths.iter().max().expect("nonempty");

    if n <= cap.h_small {
        let parts: Vec<&Matrix> = jobs.iter().map(|j| &j.input).collect();
        let input_mlp = MlpSpec::new(vec![MlpStep::Blocks(
            jobs.iter().zip(&slot_widths).map(|(j, &sw)| (j.input.cols(), widen(&j.input_mlp, sw, w))).collect(),
        )]);
        let heads = jobs.iter().map(|j| embed_head(&j.head, w, 0)).collect();
        let mlp = MlpSpec::new(vec![MlpStep::Blocks(
            jobs.iter().map(|j| (j.head.output_width(), j.output_mlp.clone())).collect(),
        )]);
        let mut col = 0;
        let slots = jobs
            .iter()
            .zip(&result_widths)
            .map(|(j, &rw)| {
                let s = Slot { col, width: rw, keep: j.keep.clone() };
                col += rw;
                s
            })
            .collect();
        return Ok(Packed {
            input: concat(&parts, Axis::Cols)?,
            params: TransformerParams {
                input_mlp,
                layers: vec![LayerParams { heads, mlp, residual: false }],
                mask: cap.mask,
            },
            slots,
        });
    }

    if let Some(k) = result_widths.iter().position(|&rw| rw > w) {
        return Err(restriction(format!("instance {k} result is wider than its {w}-column slot")));
    }
    let heads_used = cap.h_small;
    let depth = n.div_ceil(heads_used);
    let partition = depth * w;
    let state_width = heads_used * partition;
    let job_at = |h: usize, l: usize| {
        let k = l * heads_used + h;
        (k < n).then_some(k)
    };

    let empty = Matrix::zeros(rows, 0);
    let mut parts = Vec::with_capacity(heads_used * depth);
    let mut blocks = Vec::with_capacity(heads_used * depth);
    for h in 0..heads_used {
        for l in 0..depth {
            match job_at(h, l) {
                Some(k) => {
                    parts.push(&jobs[k].input);
                    blocks.push((jobs[k].input.cols(), widen(&jobs[k].input_mlp, slot_widths[k], w)));
                }
                None => {
                    parts.push(&empty);
                    blocks.push((0, MlpSpec::new(vec![MlpStep::PadConst(vec![0.0; w])])));
                }
            }
        }
    }

    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut heads = Vec::with_capacity(heads_used);
        let mut results = Vec::with_capacity(heads_used + 1);
        for h in 0..heads_used {
            match job_at(h, l) {
                Some(k) => {
                    heads.push(embed_head(&jobs[k].head, partition, l * w));
                    results.push((jobs[k].head.output_width(), widen(&jobs[k].output_mlp, result_widths[k], w)));
                }
                None => {
                    heads.push(idle_head(partition));
                    results.push((1, MlpSpec::new(vec![MlpStep::SelectCols(vec![]), MlpStep::PadConst(vec![0.0; w])])));
                }
            }
        }
        results.push((state_width, MlpSpec::identity()));
        // Layer output before selection: [result_0 .. result_{H'-1} | previous state].
        let route = (0..state_width)
            .map(|c| {
                let slot = c / w;
                if slot % depth == l {
                    (slot / depth) * w + c % w
                } else {
                    heads_used * w + c
                }
            })
            .collect();
        layers.push(LayerParams {
            heads,
            mlp: MlpSpec::new(vec![MlpStep::Blocks(results), MlpStep::SelectCols(route)]),
            residual: true,
        });
    }

    let slots = (0..n)
        .map(|k| {
            let (h, l) = (k % heads_used, k / heads_used);
            Slot { col: (h * depth + l) * w, width: result_widths[k], keep: jobs[k].keep.clone() }
        })
        .collect();
    Ok(Packed {
        input: concat(&parts, Axis::Cols)?,
        params: TransformerParams { input_mlp: MlpSpec::new(vec![MlpStep::Blocks(blocks)]), layers, mask: cap.mask },
        slots,
    })
}
