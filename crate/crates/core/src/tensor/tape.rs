use std::borrow::Cow;

use super::{gemm_acc, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Abs(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    Transpose(usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so they can be differentiated.
///
/// Node indices are assigned on creation, so the node list is always in
/// topological order and the backward pass is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    params_require_grad: bool,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store attached.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            params_require_grad: false,
        }
    }
}

impl<'p> Tape<'p> {
    /// A tape whose parameter leaves track gradients.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            params_require_grad: true,
        }
    }

    /// A tape for forward-only evaluation: parameters are constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Tape {
            params_require_grad: false,
            ..Tape::with_params(params)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param,
            requires_grad: self.params_require_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            false,
            false,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_acc(
                &mut out[i * m * n..(i + 1) * m * n],
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul(a.0, b.0),
            rg,
        ))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name} {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// `a + b` where `b` matches the trailing dimensions of `a` (leading 1s
    /// of `b` are ignored), repeated over the leading dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let trimmed: Vec<usize> = sb.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() > sa.len() || sa[sa.len() - trimmed.len()..] != trimmed[..] {
            return Err(Error::Shape(format!("broadcast add {sa:?} + {sb:?}")));
        }
        let tb = self.value(b).data();
        let width = tb.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb[i % width])
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::AddBroadcast(a.0, b.0), rg))
    }

    /// `x · weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        let out_width = self.shape(xw)[1];
        if self.value(bias).numel() != out_width {
            return Err(Error::Shape(format!(
                "linear bias {:?} for output width {out_width}",
                self.shape(bias)
            )));
        }
        self.add_broadcast(xw, bias)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        let rg = self.rg(a.0);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a.0);
        self.push(t, Op::Relu(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        let rg = self.rg(a.0);
        self.push(t, Op::Abs(a.0), rg)
    }

    /// Softmax along the last dimension, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let width = ta.shape().last().copied().unwrap_or(1).max(1);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        let rg = self.rg(a.0);
        self.push(t, Op::Softmax(a.0), rg)
    }

    /// Concatenates 2-D inputs with equal row counts along columns.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let rows = self.shape(*first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!(
                    "concat input {s:?} does not have {rows} row(s)"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = xs.iter().any(|x| self.rg(x.0));
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::Concat(xs.iter().map(|x| x.0).collect()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Swaps the last two dimensions of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        let (batch, r, c) = match *s {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(Error::Shape(format!("transpose of {s:?}"))),
        };
        let data = transpose_blocks(ta.data(), batch, r, c);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(a.0);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(a.0), rg))
    }

    /// Selects rows of a 2-D table; the gradient scatters back to those rows.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let s = tt.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather from {s:?}")));
        }
        let (n, w) = (s[0], s[1]);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= n {
                return Err(Error::Lookup(format!("row {i} of a {n}-row table")));
            }
            data.extend_from_slice(&tt.data()[i * w..(i + 1) * w]);
        }
        let rg = self.rg(table.0);
        let t = Tensor::new(vec![indices.len(), w], data)?;
        Ok(self.push(t, Op::Gather(table.0, indices.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(m), Op::Mean(a.0), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::SumSquares(a.0), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are kept for leaves and parameters only; intermediate
    /// gradients are released as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.propagate(node, g, lower);
            if !matches!(node.op, Op::Leaf | Op::Param) {
                upper[0] = None;
            }
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (ParamId(pid), v.0)))
            .filter(|&(_, node)| self.nodes[node].requires_grad)
            .collect();
        Ok(Gradients {
            grads,
            params,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| -> &Tensor { &self.nodes[i].value };
        let rg = |i: usize| self.nodes[i].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(a) {
                    // ga += g · bᵀ
                    accumulate(grads, a, ta.shape(), |ga| {
                        gemm_acc(ga, gd, tb.data(), m, n, k, false, true)
                    });
                }
                if rg(b) {
                    // gb += aᵀ · g
                    accumulate(grads, b, tb.shape(), |gb| {
                        gemm_acc(gb, ta.data(), gd, k, m, n, true, false)
                    });
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let s = ta.shape();
                let (batch, m, k, n) = (s[0], s[1], s[2], tb.shape()[2]);
                if rg(a) {
                    accumulate(grads, a, ta.shape(), |ga| {
                        for i in 0..batch {
                            gemm_acc(
                                &mut ga[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                false,
                                true,
                            );
                        }
                    });
                }
                if rg(b) {
                    accumulate(grads, b, tb.shape(), |gb| {
                        for i in 0..batch {
                            gemm_acc(
                                &mut gb[i * k * n..(i + 1) * k * n],
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                &gd[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                            );
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if rg(x) {
                        accumulate(grads, x, g.shape(), |gx| add_into(gx, gd, 1.0));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(grads, a, g.shape(), |ga| add_into(ga, gd, 1.0));
                }
                if rg(b) {
                    accumulate(grads, b, g.shape(), |gb| add_into(gb, gd, -1.0));
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if rg(a) {
                    accumulate(grads, a, g.shape(), |ga| {
                        for ((o, &gi), &bi) in ga.iter_mut().zip(gd).zip(tb.data()) {
                            *o += gi * bi;
                        }
                    });
                }
                if rg(b) {
                    accumulate(grads, b, g.shape(), |gb| {
                        for ((o, &gi), &ai) in gb.iter_mut().zip(gd).zip(ta.data()) {
                            *o += gi * ai;
                        }
                    });
                }
            }
            &Op::AddBroadcast(a, b) => {
                if rg(a) {
                    accumulate(grads, a, g.shape(), |ga| add_into(ga, gd, 1.0));
                }
                if rg(b) {
                    let tb = val(b);
                    let width = tb.numel();
                    accumulate(grads, b, tb.shape(), |gb| {
                        for (i, &gi) in gd.iter().enumerate() {
                            gb[i % width] += gi;
                        }
                    });
                }
            }
            &Op::Scale(a, c) => {
                accumulate(grads, a, g.shape(), |ga| add_into(ga, gd, c));
            }
            &Op::Relu(a) => {
                let ta = val(a);
                accumulate(grads, a, g.shape(), |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(gd).zip(ta.data()) {
                        if x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            &Op::Abs(a) => {
                let ta = val(a);
                accumulate(grads, a, g.shape(), |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(gd).zip(ta.data()) {
                        if x > 0.0 {
                            *o += gi;
                        } else if x < 0.0 {
                            *o -= gi;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let width = node.value.shape().last().copied().unwrap_or(1).max(1);
                accumulate(grads, a, g.shape(), |ga| {
                    for ((o, gr), yr) in ga
                        .chunks_mut(width)
                        .zip(gd.chunks(width))
                        .zip(y.chunks(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Concat(inputs) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &x in inputs {
                    let w = val(x).shape()[1];
                    if rg(x) {
                        accumulate(grads, x, val(x).shape(), |gx| {
                            for r in 0..rows {
                                add_into(
                                    &mut gx[r * w..(r + 1) * w],
                                    &gd[r * total + offset..r * total + offset + w],
                                    1.0,
                                );
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::Reshape(a) => {
                accumulate(grads, a, val(a).shape(), |ga| add_into(ga, gd, 1.0));
            }
            &Op::Transpose(a) => {
                let s = g.shape();
                let (batch, r, c) = match *s {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!("transpose output is 2-D or 3-D"),
                };
                let back = transpose_blocks(gd, batch, r, c);
                accumulate(grads, a, val(a).shape(), |ga| add_into(ga, &back, 1.0));
            }
            Op::Gather(table, indices) => {
                let tt = val(*table);
                let w = tt.shape()[1];
                accumulate(grads, *table, tt.shape(), |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * w..(i + 1) * w], &gd[r * w..(r + 1) * w], 1.0);
                    }
                });
            }
            &Op::Sum(a) => {
                let g0 = gd[0];
                accumulate(grads, a, val(a).shape(), |ga| ga.iter_mut().for_each(|o| *o += g0));
            }
            &Op::Mean(a) => {
                let ta = val(a);
                let g0 = gd[0] / ta.numel() as f64;
                accumulate(grads, a, ta.shape(), |ga| ga.iter_mut().for_each(|o| *o += g0));
            }
            &Op::SumSquares(a) => {
                let ta = val(a);
                let g0 = gd[0];
                accumulate(grads, a, ta.shape(), |ga| {
                    for (o, &x) in ga.iter_mut().zip(ta.data()) {
                        *o += 2.0 * x * g0;
                    }
                });
            }
        }
    }
}

fn accumulate(
    grads: &mut [Option<Tensor>],
    index: usize,
    shape: &[usize],
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[index].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn transpose_blocks(data: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    out
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf or parameter node.
    ///
    /// Leaves that requires-grad but were not reached get a zero gradient.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        match &self.grads[v.0] {
            Some(g) => Some(g.clone()),
            None => Some(Tensor::zeros(&self.shapes[v.0])),
        }
    }

    /// Gradients for every parameter used on the tape, zero-filled where the
    /// loss did not depend on it.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .map(|&(id, node)| {
                let g = self.grads[node]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[node]));
                (id, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_small_product() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let x = t.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap());
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let a = t.constant(Tensor::row(&[1.0, 2.0]));
        let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn linear_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[1.0, 1.0]));
        let w = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::row(&[0.0, 0.0]));
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 6.0]);

        let i = t.constant(Tensor::eye(2));
        let x2 = t.constant(Tensor::row(&[-3.0, 7.5]));
        let y2 = t.linear(x2, i, b).unwrap();
        assert_eq!(t.value(y2).data(), &[-3.0, 7.5]);

        let bad_bias = t.constant(Tensor::row(&[0.0; 3]));
        assert!(matches!(t.linear(x, w, bad_bias), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let p = t.constant(Tensor::row(&[0.5, 3.0]));
        let q = t.relu(p);
        assert_eq!(t.value(q), t.value(p));
    }

    #[test]
    fn relu_subgradient_is_zero_at_kink() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[-1.0, 0.0, 2.0]), true);
        let y = t.relu(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[3.0; 4]));
        let y = t.softmax(x);
        assert!(t.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let big = t.constant(Tensor::row(&[0.0, 1000.0]));
        let p = t.softmax(big);
        let d = t.value(p).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[0] < 1e-300 && (d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(&[1.0, 2.0]), true);
        let b = t.leaf(Tensor::row(&[3.0, 4.0, 5.0]), true);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[1, 5]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let tall = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.concat(&[a, tall]), Err(Error::Shape(_))));

        // Weighted sum so each output slot has a distinct upstream gradient.
        let w = t.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let cw = t.mul(c, w).unwrap();
        let s = t.sum(cw);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn concat_of_five_hourglass_scales_at_d16() {
        let d = 16;
        let mut t = Tape::new();
        let parts: Vec<Var> = [2 * d, d, d / 2, d, 2 * d]
            .iter()
            .map(|&w| t.constant(Tensor::zeros(&[1, w])))
            .collect();
        let e = t.concat(&parts).unwrap();
        assert_eq!(t.shape(e), &[1, 104]);
        assert_eq!(104, 13 * d / 2);
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, -2.0, 3.0]), true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let sq = t.mul(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_subexpression_sums_both_paths() {
        // y = x·a ; z = y + y·y ; dz/dx = a(1 + 2y)
        let (xv, av) = (0.7, -1.3);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(xv), true);
        let a = t.constant(Tensor::scalar(av));
        let y = t.mul(x, a).unwrap();
        let yy = t.mul(y, y).unwrap();
        let z = t.add(y, yy).unwrap();
        let g = t.backward(z).unwrap();
        let yv = xv * av;
        let expected = av * (1.0 + 2.0 * yv);
        assert!((g.get(x).unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn gather_out_of_range_is_lookup_error() {
        let mut t = Tape::new();
        let table = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.gather_rows(table, &[3]), Err(Error::Lookup(_))));
    }

    #[test]
    fn gather_scatters_repeated_rows() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(), true);
        let rows = t.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(rows).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = t.sum(rows);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn param_leaves_are_memoized() {
        let mut store = ParamStore::new();
        let id = store.add("w", super::super::ParamKind::Weight, Tensor::row(&[1.0, 2.0]));
        let mut t = Tape::with_params(&store);
        let a = t.param(id);
        let b = t.param(id);
        assert_eq!(a, b);
        let s = t.sum_squares(a);
        let grads = t.backward(s).unwrap().into_param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 4.0]);
    }
}
