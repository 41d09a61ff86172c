//! Reverse-mode automatic differentiation over f64 matrices.
//!
//! A [`Tape`] records matrix operations during a forward pass; nodes are
//! topologically ordered by construction, so [`Tape::backward`] is a single
//! reverse sweep. Values are `ndarray::Array2<f64>`; scalars are 1x1.
//!
//! Gradients are returned in a separate [`Grads`] table rather than stored
//! in the tape, so a tape built for inference never allocates them.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op {
    Leaf,
    Add(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    MatMul(VarId, VarId),
    Transpose(VarId),
    /// matrix (n x d) + row (1 x d) broadcast over rows
    AddRowBroadcast(VarId, VarId),
    SoftmaxRows(VarId),
    /// ln(max(x, floor))
    LnFloor(VarId, f64),
    Gelu(VarId),
    LayerNormRows {
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
    },
    EmbedRows {
        table: VarId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<VarId>),
    /// divide each row by its sum
    RowNormalize(VarId),
    /// sum(w .* x) -> 1x1, w constant
    SumWeighted {
        x: VarId,
        weights: Array2<f64>,
    },
    /// x .* m, m constant
    MulConst {
        x: VarId,
        m: Array2<f64>,
    },
    /// x + m, m constant
    AddConst {
        x: VarId,
        m: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `id`. Zero-shaped entries are returned
    /// as an explicit zero matrix.
    pub fn get(&self, tape: &Tape, id: VarId) -> Array2<f64> {
        match &self.by_node[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[id.0].value.raw_dim()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn ng(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable leaf (a parameter tensor).
    pub fn param(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let v = self.value(x) * c;
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        let v = self.value(x) + c;
        let ng = self.ng(x);
        self.push(v, Op::AddScalar(x, c), ng)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: VarId) -> VarId {
        let v = self.value(x).t().to_owned();
        let ng = self.ng(x);
        self.push(v, Op::Transpose(x), ng)
    }

    pub fn add_row_broadcast(&mut self, x: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(x).ncols(), self.value(row).ncols());
        let v = self.value(x) + &self.value(row).row(0);
        let ng = self.ng(x) || self.ng(row);
        self.push(v, Op::AddRowBroadcast(x, row), ng)
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|a| (a - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|a| a / sum);
        }
        let ng = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), ng)
    }

    pub fn ln_floor(&mut self, x: VarId, floor: f64) -> VarId {
        let v = self.value(x).mapv(|a| a.max(floor).ln());
        let ng = self.ng(x);
        self.push(v, Op::LnFloor(x, floor), ng)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).mapv(gelu_val);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn layer_norm_rows(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> VarId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|a| (a - mean) * inv);
        }
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        for mut row in v.rows_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                *a = *a * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v, Op::LayerNormRows { x, gain, bias, eps }, ng)
    }

    pub fn embed_rows(&mut self, table: VarId, ids: &[usize]) -> VarId {
        let tv = self.value(table);
        let mut v = Array2::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            v,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(x);
        self.push(v, Op::SliceCols { x, start, len }, ng)
    }

    pub fn concat_cols(&mut self, xs: &[VarId]) -> VarId {
        let views: Vec<_> = xs.iter().map(|id| self.value(*id).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let ng = xs.iter().any(|id| self.ng(*id));
        self.push(v, Op::ConcatCols(xs.to_vec()), ng)
    }

    pub fn row_normalize(&mut self, x: VarId) -> VarId {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|a| a / sum);
        }
        let ng = self.ng(x);
        self.push(v, Op::RowNormalize(x), ng)
    }

    pub fn sum_weighted(&mut self, x: VarId, weights: Array2<f64>) -> VarId {
        debug_assert_eq!(self.value(x).dim(), weights.dim());
        let total = (self.value(x) * &weights).sum();
        let ng = self.ng(x);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SumWeighted { x, weights },
            ng,
        )
    }

    pub fn mul_const(&mut self, x: VarId, m: Array2<f64>) -> VarId {
        debug_assert_eq!(self.value(x).dim(), m.dim());
        let v = self.value(x) * &m;
        let ng = self.ng(x);
        self.push(v, Op::MulConst { x, m }, ng)
    }

    pub fn add_const(&mut self, x: VarId, m: Array2<f64>) -> VarId {
        debug_assert_eq!(self.value(x).dim(), m.dim());
        let v = self.value(x) + &m;
        let ng = self.ng(x);
        self.push(v, Op::AddConst { x, m }, ng)
    }

    /// Reverse sweep from a 1x1 loss node.
    pub fn backward(&self, loss: VarId) -> Result<Grads> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::DimMismatch(
                "backward expects a 1x1 loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Scale(x, c) => {
                    self.acc(&mut grads, *x, g * *c);
                }
                Op::AddScalar(x, _) => {
                    self.acc(&mut grads, *x, g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Transpose(x) => {
                    self.acc(&mut grads, *x, g.t().to_owned());
                }
                Op::AddRowBroadcast(x, row) => {
                    if self.ng(*row) {
                        let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, summed);
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..y.ncols() {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::LnFloor(x, floor) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    gx.zip_mut_with(xv, |gi, &xi| {
                        *gi = if xi > *floor { *gi / xi } else { 0.0 };
                    });
                    self.acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    gx.zip_mut_with(xv, |gi, &xi| *gi *= gelu_grad(xi));
                    self.acc(&mut grads, *x, gx);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let d = xv.ncols();
                    let dn = d as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggain = Array2::zeros((1, d));
                    let mut gbias = Array2::zeros((1, d));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.sum() / dn;
                        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / dn;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|a| (a - mean) * inv).collect();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; d];
                        for c in 0..d {
                            let go = g[[r, c]];
                            ggain[[0, c]] += go * xhat[c];
                            gbias[[0, c]] += go;
                            let dxh = go * gv[[0, c]];
                            dxhat[c] = dxh;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[c];
                        }
                        for c in 0..d {
                            gx[[r, c]] = inv
                                * (dxhat[c] - sum_dxhat / dn - xhat[c] * sum_dxhat_xhat / dn);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                    self.acc(&mut grads, *gain, ggain);
                    self.acc(&mut grads, *bias, gbias);
                }
                Op::EmbedRows { table, ids } => {
                    let tdim = self.value(*table).raw_dim();
                    let mut gt = Array2::zeros(tdim);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    self.acc(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start, len } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    self.acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(xs) => {
                    let mut offset = 0;
                    for x in xs {
                        let w = self.value(*x).ncols();
                        let part = g.slice(s![.., offset..offset + w]).to_owned();
                        offset += w;
                        self.acc(&mut grads, *x, part);
                    }
                }
                Op::RowNormalize(x) => {
                    let xv = self.value(*x);
                    let y = &self.nodes[i].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        let sum = xv.row(r).sum();
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(g.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..xv.ncols() {
                            gx[[r, c]] = (g[[r, c]] - dot) / sum;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SumWeighted { x, weights } => {
                    let gx = weights * g[[0, 0]];
                    self.acc(&mut grads, *x, gx);
                }
                Op::MulConst { x, m } => {
                    self.acc(&mut grads, *x, g * m);
                }
                Op::AddConst { x, .. } => {
                    self.acc(&mut grads, *x, g);
                }
            }
        }
        Ok(Grads { by_node: grads })
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], id: VarId, delta: Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
