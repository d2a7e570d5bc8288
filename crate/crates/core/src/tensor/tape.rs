use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::{matmul_into, matmul_t_into, t_matmul_into, Tensor};
use crate::error::{Error, Result};

/// Gather/scatter plan of one sparse convolution: `(input row, output row,
/// kernel offset)` triples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelTriples {
    pub n_in: usize,
    pub n_out: usize,
    pub n_offsets: usize,
    pub triples: Vec<(usize, usize, usize)>,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy(usize, usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    Reshape(usize),
    Sum(usize),
    SumRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    BceLogits {
        logits: usize,
        targets: Rc<Tensor>,
    },
    DiceLogits {
        logits: usize,
        targets: Rc<Tensor>,
        eps: f64,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    SparseConv {
        x: usize,
        w: usize,
        map: Rc<KernelTriples>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
            Op::DiceLogits { .. } => "dice_with_logits",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::SparseConv { .. } => "sparse_conv",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::SumRows(a) => vec![*a],
            Op::LayerNorm { x, .. } | Op::NormalizeRows { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::CrossEntropy { logits, .. }
            | Op::BceLogits { logits, .. }
            | Op::DiceLogits { logits, .. } => vec![*logits],
            Op::SparseConv { x, w, .. } => vec![*x, *w],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of one forward computation.
///
/// Node ids increase monotonically, so the record is always in topological
/// order and the backward sweep is a single reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_leaf(&self, value: Rc<Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), false, None)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(Rc::new(value), true, None)
    }

    /// Parameter leaf; repeated calls for the same id return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push_leaf(Rc::new(store.get(id).clone()), true, Some(id));
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op: Op, value: Tensor) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.requires(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        if vals.iter().any(|v| v.cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(Op::ConcatRows(parts.iter().map(|p| p.id).collect()), out)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        if vals.iter().any(|v| v.rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), out)
    }

    /// Concatenation of 2-D values along `axis` (0 = rows, 1 = columns).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(Error::shape("concat", format!("axis {axis} on 2-D values"))),
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_op(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accum(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accum_with(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(slot.data_mut());
}

fn backward_op(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            accum_with(grads, nodes, *a, |ga| matmul_t_into(g.data(), bv.data(), ga, m, n, k));
            accum_with(grads, nodes, *b, |gb| t_matmul_into(av.data(), g.data(), gb, m, k, n));
        }
        Op::MatMulT(a, b) => {
            // out = a · bᵀ, a: m×k, b: n×k
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            accum_with(grads, nodes, *a, |ga| matmul_into(g.data(), bv.data(), ga, m, n, k));
            accum_with(grads, nodes, *b, |gb| t_matmul_into(g.data(), av.data(), gb, m, n, k));
        }
        Op::Transpose(a) => accum(grads, nodes, *a, g.transpose()),
        Op::Add(a, b) => {
            accum(grads, nodes, *a, g.clone());
            accum(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, g.clone());
            accum(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accum_with(grads, nodes, *a, |ga| {
                for ((o, gi), bi) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gi * bi;
                }
            });
            accum_with(grads, nodes, *b, |gb| {
                for ((o, gi), ai) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi * ai;
                }
            });
        }
        Op::AddRow(a, b) => {
            accum(grads, nodes, *a, g.clone());
            let n = g.cols();
            accum_with(grads, nodes, *b, |gb| {
                for r in 0..g.rows() {
                    for (o, gi) in gb.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *o += gi;
                    }
                }
            });
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = g.cols();
            accum_with(grads, nodes, *a, |ga| {
                for r in 0..g.rows() {
                    for j in 0..n {
                        ga[r * n + j] += g.data()[r * n + j] * bv.data()[j];
                    }
                }
            });
            accum_with(grads, nodes, *b, |gb| {
                for r in 0..g.rows() {
                    for j in 0..n {
                        gb[j] += g.data()[r * n + j] * av.data()[r * n + j];
                    }
                }
            });
        }
        Op::Scale(a, s) => accum(grads, nodes, *a, g.map(|v| v * s)),
        Op::AddScalar(a) => accum(grads, nodes, *a, g.clone()),
        Op::ScaleBy(a, s) => {
            let (av, sv) = (val(*a), val(*s).item());
            accum(grads, nodes, *a, g.map(|v| v * sv));
            let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
            accum_with(grads, nodes, *s, |gs| gs[0] += ds);
        }
        Op::Exp(a) => accum_with(grads, nodes, *a, |ga| {
            for ((o, gi), y) in ga.iter_mut().zip(g.data()).zip(out.data()) {
                *o += gi * y;
            }
        }),
        Op::Log(a) => {
            let av = val(*a);
            accum_with(grads, nodes, *a, |ga| {
                for ((o, gi), x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi / x;
                }
            })
        }
        Op::Sigmoid(a) => accum_with(grads, nodes, *a, |ga| {
            for ((o, gi), y) in ga.iter_mut().zip(g.data()).zip(out.data()) {
                *o += gi * y * (1.0 - y);
            }
        }),
        Op::Relu(a) => {
            let av = val(*a);
            accum_with(grads, nodes, *a, |ga| {
                for ((o, gi), x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                    if *x > 0.0 {
                        *o += gi;
                    }
                }
            })
        }
        Op::Softmax(a) => {
            let n = out.cols();
            accum_with(grads, nodes, *a, |ga| {
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            })
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            let n = out.cols();
            accum_with(grads, nodes, *x, |gx| {
                for r in 0..out.rows() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] += inv_std[r] * (gr[j] - mean_g - xh[j] * mean_gx);
                    }
                }
            })
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                let slice = &g.data()[offset..offset + len];
                accum_with(grads, nodes, p, |gp| {
                    for (o, v) in gp.iter_mut().zip(slice) {
                        *o += v;
                    }
                });
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                accum_with(grads, nodes, p, |gp| {
                    for r in 0..g.rows() {
                        for j in 0..w {
                            gp[r * w + j] += g.data()[r * total + col + j];
                        }
                    }
                });
                col += w;
            }
        }
        Op::SliceRows(a, start) => {
            let n = g.cols();
            accum_with(grads, nodes, *a, |ga| {
                for (o, v) in ga[start * n..start * n + g.numel()].iter_mut().zip(g.data()) {
                    *o += v;
                }
            })
        }
        Op::SliceCols(a, start, total) => {
            let w = g.cols();
            accum_with(grads, nodes, *a, |ga| {
                for r in 0..g.rows() {
                    for j in 0..w {
                        ga[r * total + start + j] += g.data()[r * w + j];
                    }
                }
            })
        }
        Op::GatherRows(a, idx) => {
            let n = g.cols();
            accum_with(grads, nodes, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[src * n + j] += g.data()[r * n + j];
                    }
                }
            })
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            let reshaped = Tensor::new(shape, g.data().to_vec()).expect("reshape preserves size");
            accum(grads, nodes, *a, reshaped)
        }
        Op::Sum(a) => {
            let s = g.item();
            accum_with(grads, nodes, *a, |ga| ga.iter_mut().for_each(|o| *o += s))
        }
        Op::SumRows(a) => {
            let n = g.cols();
            accum_with(grads, nodes, *a, |ga| {
                for chunk in ga.chunks_mut(n) {
                    for (o, v) in chunk.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            })
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            total_weight,
        } => {
            if *total_weight == 0.0 {
                return;
            }
            let scale = g.item() / total_weight;
            let n = nodes[*logits].value.cols();
            accum_with(grads, nodes, *logits, |gl| {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let w = weights[r] * scale;
                    for j in 0..n {
                        let onehot = if j == *t { 1.0 } else { 0.0 };
                        gl[r * n + j] += w * (probs[r * n + j] - onehot);
                    }
                }
            })
        }
        Op::BceLogits { logits, targets } => {
            let x = val(*logits);
            let scale = g.item() / x.numel() as f64;
            accum_with(grads, nodes, *logits, |gl| {
                for ((o, xi), ti) in gl.iter_mut().zip(x.data()).zip(targets.data()) {
                    *o += scale * (sigmoid(*xi) - ti);
                }
            })
        }
        Op::DiceLogits { logits, targets, eps } => {
            let x = val(*logits);
            let n = x.cols();
            let rows = x.rows();
            let scale = g.item() / rows as f64;
            accum_with(grads, nodes, *logits, |gl| {
                for r in 0..rows {
                    let xs = &x.data()[r * n..(r + 1) * n];
                    let ts = &targets.data()[r * n..(r + 1) * n];
                    let p: Vec<f64> = xs.iter().map(|v| sigmoid(*v)).collect();
                    let inter: f64 = p.iter().zip(ts).map(|(a, b)| a * b).sum();
                    let denom = p.iter().sum::<f64>() + ts.iter().sum::<f64>() + eps;
                    for j in 0..n {
                        let dd_dp = -2.0 * ts[j] / denom + 2.0 * inter / (denom * denom);
                        gl[r * n + j] += scale * dd_dp * p[j] * (1.0 - p[j]);
                    }
                }
            })
        }
        Op::NormalizeRows { x, norms } => {
            let n = out.cols();
            accum_with(grads, nodes, *x, |gx| {
                for r in 0..out.rows() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += (gr[j] - y[j] * dot) / norms[r];
                    }
                }
            })
        }
        Op::SparseConv { x, w, map } => {
            let (xv, wv) = (val(*x), val(*w));
            let cin = xv.cols();
            let cout = g.cols();
            accum_with(grads, nodes, *x, |gx| {
                for &(i, o, k) in &map.triples {
                    let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
                    let go = &g.data()[o * cout..(o + 1) * cout];
                    let gi = &mut gx[i * cin..(i + 1) * cin];
                    for (c, gic) in gi.iter_mut().enumerate() {
                        let wrow = &wk[c * cout..(c + 1) * cout];
                        *gic += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
            accum_with(grads, nodes, *w, |gw| {
                for &(i, o, k) in &map.triples {
                    let xi = &xv.data()[i * cin..(i + 1) * cin];
                    let go = &g.data()[o * cout..(o + 1) * cout];
                    let gk = &mut gw[k * cin * cout..(k + 1) * cin * cout];
                    for (c, &xc) in xi.iter().enumerate() {
                        if xc == 0.0 {
                            continue;
                        }
                        for (o2, gv) in gk[c * cout..(c + 1) * cout].iter_mut().zip(go) {
                            *o2 += xc * gv;
                        }
                    }
                }
            });
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax; entries with `admit[j] == false` get exactly zero weight.
/// Row softmax of `x` into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    softmax_row(x, None, out);
}

pub(crate) fn softmax_row(x: &[f64], admit: Option<&[bool]>, out: &mut [f64]) -> bool {
    let ok = |j: usize| admit.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if ok(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(op, v)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        self.tape.push(Op::MatMul(self.id, other.id), v)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul_t(&other.value())?;
        self.tape.push(Op::MatMulT(self.id, other.id), v)
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let v = self.value().transpose();
        self.tape.push(Op::Transpose(self.id), v)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.tape
            .push(Op::Add(self.id, other.id), Tensor::new(a.shape().to_vec(), data)?)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.tape
            .push(Op::Sub(self.id, other.id), Tensor::new(a.shape().to_vec(), data)?)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.tape
            .push(Op::Mul(self.id, other.id), Tensor::new(a.shape().to_vec(), data)?)
    }

    /// Adds a `1×n` row to every row of an `m×n` value.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let n = a.cols();
        if b.numel() != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", a.shape(), b.shape())));
        }
        let mut out = (*a).clone();
        for r in out.data_mut().chunks_mut(n) {
            for (o, v) in r.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        self.tape.push(Op::AddRow(self.id, row.id), out)
    }

    /// Multiplies every row of an `m×n` value elementwise by a `1×n` row.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let n = a.cols();
        if b.numel() != n {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", a.shape(), b.shape())));
        }
        let mut out = (*a).clone();
        for r in out.data_mut().chunks_mut(n) {
            for (o, v) in r.iter_mut().zip(b.data()) {
                *o *= v;
            }
        }
        self.tape.push(Op::MulRow(self.id, row.id), out)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, s), |v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), |v| v + s)
    }

    /// Multiplies by a `1×1` variable.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scalar expected, got {:?}", sv.shape())));
        }
        let k = sv.item();
        self.unary(Op::ScaleBy(self.id, s.id), |v| v * k)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(bad) = a.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive input {bad}"),
            });
        }
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    /// Softmax over the last axis of a 2-D value. With `admit`, an `m×n`
    /// row-major mask, excluded entries get exactly zero probability; a row
    /// with nothing admitted is an error.
    pub fn softmax_rows(&self, admit: Option<&[bool]>) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.cols();
        if let Some(m) = admit {
            if m.len() != a.numel() {
                return Err(Error::shape("softmax", "mask size differs from input"));
            }
        }
        let mut out = Tensor::zeros(a.shape());
        for r in 0..a.rows() {
            let row_mask = admit.map(|m| &m[r * n..(r + 1) * n]);
            if !softmax_row(a.row(r), row_mask, out.row_mut(r)) {
                return Err(Error::Contract(format!("softmax row {r} admits no entries")));
            }
        }
        self.tape.push(Op::Softmax(self.id), out)
    }

    /// Softmax along `axis` of a 2-D value.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        match axis {
            1 => self.softmax_rows(None),
            0 => self.t()?.softmax_rows(None)?.t(),
            _ => Err(Error::shape("softmax", format!("axis {axis} on 2-D value"))),
        }
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.cols();
        let mut xhat = vec![0.0; a.numel()];
        let mut inv_std = Vec::with_capacity(a.rows());
        for r in 0..a.rows() {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                xhat[r * n + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(a.shape().to_vec(), xhat.clone())?;
        self.tape.push(
            Op::LayerNorm {
                x: self.id,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start > end || end > a.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {}", a.rows())));
        }
        let n = a.cols();
        let out = Tensor::new(vec![end - start, n], a.data()[start * n..end * n].to_vec())?;
        self.tape.push(Op::SliceRows(self.id, start), out)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let total = a.cols();
        if start > end || end > total {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {total}")));
        }
        let mut data = Vec::with_capacity(a.rows() * (end - start));
        for r in 0..a.rows() {
            data.extend_from_slice(&a.row(r)[start..end]);
        }
        let out = Tensor::new(vec![a.rows(), end - start], data)?;
        self.tape.push(Op::SliceCols(self.id, start, total), out)
    }

    /// Picks rows by index; repeated indices are allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= a.rows() {
                return Err(Error::shape("gather_rows", format!("index {i} of {}", a.rows())));
            }
            data.extend_from_slice(a.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], data)?;
        self.tape
            .push(Op::GatherRows(self.id, Rc::new(idx.to_vec())), out)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.push(Op::Reshape(self.id), v)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Column sums: `m×n -> 1×n`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.cols();
        let mut out = vec![0.0; n];
        for r in 0..a.rows() {
            for (o, v) in out.iter_mut().zip(a.row(r)) {
                *o += v;
            }
        }
        self.tape.push(Op::SumRows(self.id), Tensor::new(vec![1, n], out)?)
    }

    /// Column means: `m×n -> 1×n`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let m = self.value().rows();
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        self.sum_rows()?.scale(1.0 / m as f64)
    }

    /// Weighted mean cross-entropy of row-wise logits.
    ///
    /// Rows whose target is `None` are ignored. The result is
    /// `Σ w_r · CE_r / Σ w_r` over contributing rows, and exactly zero when no
    /// row contributes.
    pub fn cross_entropy(&self, targets: &[Option<usize>], weights: Option<&[f64]>) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        if targets.len() != m || weights.is_some_and(|w| w.len() != m) {
            return Err(Error::shape("cross_entropy", format!("{m} rows vs {} targets", targets.len())));
        }
        let weights: Vec<f64> = weights.map_or_else(|| vec![1.0; m], <[f64]>::to_vec);
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut total_weight = 0.0;
        for r in 0..m {
            softmax_row(a.row(r), None, &mut probs[r * n..(r + 1) * n]);
            if let Some(t) = targets[r] {
                if t >= n {
                    return Err(Error::shape("cross_entropy", format!("target {t} with {n} classes")));
                }
                let row = a.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += weights[r] * (lse - row[t]);
                total_weight += weights[r];
            }
        }
        let loss = if total_weight > 0.0 { total / total_weight } else { 0.0 };
        self.tape.push(
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights,
                probs,
                total_weight,
            },
            Tensor::scalar(loss),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and `targets`.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if a.numel() != targets.numel() || a.numel() == 0 {
            return Err(Error::shape("bce_with_logits", format!("{:?} vs {:?}", a.shape(), targets.shape())));
        }
        let total: f64 = a
            .data()
            .iter()
            .zip(targets.data())
            .map(|(x, t)| softplus(*x) - x * t)
            .sum();
        self.tape.push(
            Op::BceLogits {
                logits: self.id,
                targets: Rc::new(targets.clone()),
            },
            Tensor::scalar(total / a.numel() as f64),
        )
    }

    /// Mean over rows of `1 − 2Σpg / (Σp + Σg + eps)` with `p = sigmoid(self)`.
    pub fn dice_with_logits(&self, targets: &Tensor, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != targets.shape() || a.rows() == 0 {
            return Err(Error::shape("dice_with_logits", format!("{:?} vs {:?}", a.shape(), targets.shape())));
        }
        let n = a.cols();
        let mut total = 0.0;
        for r in 0..a.rows() {
            let ts = &targets.data()[r * n..(r + 1) * n];
            let mut inter = 0.0;
            let mut psum = 0.0;
            for (x, t) in a.row(r).iter().zip(ts) {
                let p = sigmoid(*x);
                inter += p * t;
                psum += p;
            }
            total += 1.0 - 2.0 * inter / (psum + ts.iter().sum::<f64>() + eps);
        }
        self.tape.push(
            Op::DiceLogits {
                logits: self.id,
                targets: Rc::new(targets.clone()),
                eps,
            },
            Tensor::scalar(total / a.rows() as f64),
        )
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let mut out = (*a).clone();
        let mut norms = Vec::with_capacity(a.rows());
        for r in 0..a.rows() {
            let norm = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.tape.push(Op::NormalizeRows { x: self.id, norms }, out)
    }

    /// Sparse convolution: `out[o] = Σ_{(i,o,k)} self[i] · w[k]` with `w` of
    /// shape `[K, C_in, C_out]`.
    pub fn sparse_conv(&self, w: Var<'t>, map: Rc<KernelTriples>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let ws = wv.shape();
        if ws.len() != 3 || ws[0] != map.n_offsets || ws[1] != x.cols() || x.rows() != map.n_in {
            return Err(Error::shape(
                "sparse_conv",
                format!(
                    "features {:?}, weights {:?}, map {}x{} with {} offsets",
                    x.shape(),
                    ws,
                    map.n_in,
                    map.n_out,
                    map.n_offsets
                ),
            ));
        }
        let (cin, cout) = (ws[1], ws[2]);
        let mut out = vec![0.0; map.n_out * cout];
        for &(i, o, k) in &map.triples {
            let wk = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
            let orow = &mut out[o * cout..(o + 1) * cout];
            for (c, &xc) in x.row(i).iter().enumerate() {
                if xc == 0.0 {
                    continue;
                }
                for (ov, wvv) in orow.iter_mut().zip(&wk[c * cout..(c + 1) * cout]) {
                    *ov += xc * wvv;
                }
            }
        }
        let out = Tensor::new(vec![map.n_out, cout], out)?;
        self.tape.push(Op::SparseConv { x: self.id, w: w.id, map }, out)
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Adds every reached parameter gradient into `into`.
    pub fn accumulate_params(&self, into: &mut ParamGrads) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                into.accumulate(id, g);
            }
        }
    }
}
