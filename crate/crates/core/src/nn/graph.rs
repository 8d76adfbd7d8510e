//! Reverse-mode automatic differentiation over a tape of [`Tensor`] operations.
//!
//! A [`Graph`] is built per forward pass. Parameters are copied in from a
//! [`ParamStore`] and their gradients are read back out of [`Gradients`].

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Grouping for [`Graph::attention`]: query `i` attends to the unmasked keys
/// of group `query_group[i]`, whose keys occupy rows `group_keys[g]`.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub query_group: Rc<Vec<usize>>,
    pub group_keys: Rc<Vec<std::ops::Range<usize>>>,
    pub key_mask: Rc<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Square(Var),
    SumAll(Var),
    SumRows(Var),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentMax { input: Var, argmax: Vec<Option<usize>> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64>, offsets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Input => false,
            Op::Leaf | Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// A differentiable input whose gradient can be read back.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta, false, tb, false, &mut out, false);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((tr.rows, tr.cols), (1, ta.cols), "add_row shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!((tr.rows, tr.cols), (1, ta.cols), "mul_row shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *x *= b;
            }
        }
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    /// Multiplies row `r` of `a` by `col[r]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert_eq!((tc.rows, tc.cols), (ta.rows, 1), "mul_col shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            let s = tc.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Sum of each row, `n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows).map(|r| ta.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(ta.rows, 1, data);
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(1, ta.cols);
        for r in 0..ta.rows {
            for (o, x) in out.data.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let n = ta.rows as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(index.len(), ta.cols);
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(ta.row(src));
        }
        self.push(out, Op::GatherRows(a, index), &[a])
    }

    /// Column-wise max over the rows of each segment; empty segments give zeros.
    /// Ties resolve to the lowest row index.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], n_segments: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(segment.len(), ta.rows, "segment_max needs one id per row");
        let c = ta.cols;
        let mut argmax: Vec<Option<usize>> = vec![None; n_segments * c];
        for (r, &s) in segment.iter().enumerate() {
            let row = ta.row(r);
            for (k, &x) in row.iter().enumerate() {
                let slot = &mut argmax[s * c + k];
                match slot {
                    Some(best) if ta.data[*best * c + k] >= x => {}
                    _ => *slot = Some(r),
                }
            }
        }
        let data = argmax
            .iter()
            .enumerate()
            .map(|(i, am)| am.map_or(0.0, |r| ta.data[r * c + i % c]))
            .collect();
        let out = Tensor::from_vec(n_segments, c, data);
        self.push(out, Op::SegmentMax { input: a, argmax }, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (n, c) = ta.shape();
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = ta.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for k in 0..c {
                let xh = (row[k] - mean) * inv;
                xhat.data[r * c + k] = xh;
                out.data[r * c + k] = xh * g.data[k] + b.data[k];
            }
        }
        self.push(out, Op::LayerNorm { input: a, gamma, beta, xhat, inv_std }, &[a, gamma, beta])
    }

    /// Multi-head scaled dot-product attention restricted to each query's key group.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let width = tq.cols;
        assert_eq!(tk.cols, width);
        assert_eq!(tv.cols, width);
        assert_eq!(layout.query_group.len(), tq.rows);
        assert_eq!(layout.key_mask.len(), tk.rows);
        assert_eq!(width % layout.heads, 0, "width must divide into heads");
        let dh = width / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq.rows, width);
        let mut offsets = Vec::with_capacity(tq.rows + 1);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for i in 0..tq.rows {
            offsets.push(probs.len());
            let keys = layout.group_keys[layout.query_group[i]].clone();
            let qi = tq.row(i);
            for h in 0..layout.heads {
                let hs = h * dh..(h + 1) * dh;
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in keys.clone() {
                    if !layout.key_mask[j] {
                        scores.push(f64::NEG_INFINITY);
                        continue;
                    }
                    let kj = &tk.row(j)[hs.clone()];
                    let s = qi[hs.clone()].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                if max == f64::NEG_INFINITY {
                    probs.extend(std::iter::repeat_n(0.0, scores.len()));
                    continue;
                }
                let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                let oi = &mut out.data[i * width + h * dh..i * width + (h + 1) * dh];
                for (jj, j) in keys.clone().enumerate() {
                    let p = (scores[jj] - max).exp() / denom;
                    probs.push(p);
                    if p != 0.0 {
                        for (o, x) in oi.iter_mut().zip(&tv.row(j)[hs.clone()]) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        offsets.push(probs.len());
        self.push(out, Op::Attention { q, k, v, layout, probs, offsets }, &[q, k, v])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows, val(*a).cols);
                    gemm(g, false, val(*b), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows, val(*b).cols);
                    gemm(val(*a), true, g, false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (val(*a), val(*row));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        for (x, s) in ga.row_mut(r).iter_mut().zip(&tr.data) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*row) {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((o, x), y) in gr.data.iter_mut().zip(g.row(r)).zip(ta.row(r)) {
                            *o += x * y;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let s = tc.data[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*col) {
                    let data = (0..g.rows).map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum()).collect();
                    self.accumulate(grads, *col, Tensor::from_vec(g.rows, 1, data));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let data = g.data.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
                }
                if self.wants(*b) {
                    let data = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let data = g.data.iter().zip(&val(*a).data).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Tanh(a) => {
                let data = g.data.iter().zip(&node.value.data).map(|(x, y)| x * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Exp(a) => {
                let data = g.data.iter().zip(&node.value.data).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Log(a) => {
                let data = g.data.iter().zip(&val(*a).data).map(|(x, y)| x / y).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Powf(a, p) => {
                let data = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * p * y.powf(p - 1.0)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Square(a) => {
                let data = g.data.iter().zip(&val(*a).data).map(|(x, y)| 2.0 * x * y).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let s = g.data[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = s);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for (x, y) in ga.row_mut(i).iter_mut().zip(&g.data) {
                        *x = y / r as f64;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if self.wants(p) {
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).data.len();
                    if self.wants(p) {
                        let t = val(p);
                        self.accumulate(grads, p, Tensor::from_vec(t.rows, t.cols, g.data[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (i, &src) in index.iter().enumerate() {
                    for (x, y) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentMax { input, argmax } => {
                let (r, c) = val(*input).shape();
                let mut ga = Tensor::zeros(r, c);
                for (i, am) in argmax.iter().enumerate() {
                    if let Some(row) = am {
                        ga.data[row * c + i % c] += g.data[i];
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let (n, c) = xhat.shape();
                let gam = &val(*gamma).data;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Tensor::zeros(1, c);
                    let mut gb = Tensor::zeros(1, c);
                    for r in 0..n {
                        for k in 0..c {
                            gg.data[k] += g.data[r * c + k] * xhat.data[r * c + k];
                            gb.data[k] += g.data[r * c + k];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                    self.accumulate(grads, *beta, gb);
                }
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(n, c);
                    let cf = c as f64;
                    for r in 0..n {
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for k in 0..c {
                            let d = g.data[r * c + k] * gam[k];
                            sum += d;
                            dot += d * xhat.data[r * c + k];
                        }
                        for k in 0..c {
                            let d = g.data[r * c + k] * gam[k];
                            gx.data[r * c + k] = inv_std[r] / cf * (cf * d - sum - xhat.data[r * c + k] * dot);
                        }
                    }
                    self.accumulate(grads, *input, gx);
                }
            }
            Op::Attention { q, k, v, layout, probs, offsets } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let width = tq.cols;
                let dh = width / layout.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(tq.rows, width);
                let mut gk = Tensor::zeros(tk.rows, width);
                let mut gv = Tensor::zeros(tv.rows, width);
                let mut dp = Vec::new();
                for i in 0..tq.rows {
                    let keys = layout.group_keys[layout.query_group[i]].clone();
                    let nk = keys.len();
                    let gi = g.row(i);
                    for h in 0..layout.heads {
                        let p = &probs[offsets[i] + h * nk..offsets[i] + (h + 1) * nk];
                        let hs = h * dh..(h + 1) * dh;
                        dp.clear();
                        let mut weighted = 0.0;
                        for (jj, j) in keys.clone().enumerate() {
                            let d: f64 = gi[hs.clone()].iter().zip(&tv.row(j)[hs.clone()]).map(|(a, b)| a * b).sum();
                            dp.push(d);
                            weighted += p[jj] * d;
                            if p[jj] != 0.0 {
                                for (o, x) in gv.row_mut(j)[hs.clone()].iter_mut().zip(&gi[hs.clone()]) {
                                    *o += p[jj] * x;
                                }
                            }
                        }
                        for (jj, j) in keys.clone().enumerate() {
                            let ds = p[jj] * (dp[jj] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let (qi, kj) = (&tq.row(i)[hs.clone()], &tk.row(j)[hs.clone()]);
                            for (o, x) in gq.row_mut(i)[hs.clone()].iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            for (o, x) in gk.row_mut(j)[hs.clone()].iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Gradients for every parameter that took part in the pass, sorted by id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> =
            self.params.iter().filter_map(|(id, v)| self.get(*v).map(|g| (*id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
