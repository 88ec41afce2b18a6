use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Log(Var, f64),
    Exp(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Log(..) => "log",
            Op::Exp(_) => "exp",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, so the node list is
/// already a topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<(ParamId, Var)>,
    fault: Option<(usize, &'static str)>,
}

// (outer, len, inner) strides for an axis of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Errors if any op so far produced NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; repeated binds of the same id return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.bound.insert(id, v);
        self.bound_order.push((id, v));
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound_order.iter().copied()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    /// Elementwise sum. `b` may also be a row (its extents equal the trailing
    /// extents of `a`), in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = *va.shape().last().expect("shape is never empty");
        let same = va.shape() == vb.shape();
        let row = vb.len() == cols && vb.shape().last() == Some(&cols);
        if !(same || row) {
            return Err(Error::dim(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let bl = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % bl])
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "mul {:?} * {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| x * s).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| gelu_scalar(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for {:?}",
                va.shape()
            )));
        }
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - m).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] /= z;
                }
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let vx = self.value(x);
        let (rows, cols) = vx.dims2();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.len() != cols || vb.len() != cols {
            return Err(Error::dim(format!(
                "layer_norm over {cols} features with gain {:?} and bias {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let shape = vx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim(format!("slice {start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Gathers rows of a `[vocab x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(Error::dim("embedding table must be rank 2"));
        }
        let (v, d) = vt.dims2();
        if ids.is_empty() {
            return Err(Error::dim("embedding lookup of zero ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim(format!("embedding id {bad} outside table of {v}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(vt.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums out `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::dim(format!("sum axis {axis} for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    out[o * inner + j] += x[(o * len + i) * inner + j];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("mean axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Natural log of `max(a, floor)`; the gradient is zero where the floor binds.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| x.max(floor).ln()).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Log(a, floor), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|x| x.exp()).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.dims2();
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(va.len());
        for r in 0..rows {
            let row = va.row(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        debug_assert_eq!(out.len(), rows * cols);
        let t = Tensor {
            shape: va.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(a);
        self.push(t, Op::L2Normalize { x: a, norms }, rg)
    }

    /// `|a|` composed as `a * sign(a)` with the sign held constant.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let sign = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| x.signum() * (x != 0.0) as u8 as f64).collect(),
        };
        let s = self.constant(sign);
        self.mul(a, s)
    }

    /// Reverse sweep from a scalar. Gradients from a previous sweep are discarded.
    /// Every leaf that requires grad ends up with a gradient, zero if unreachable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            self.grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        for idx in 0..n {
            let node = &self.nodes[idx];
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[idx].is_none() {
                self.grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor { shape, data: delta });
            }
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.propagate_op(idx, &op, g.data());
        self.nodes[idx].op = op;
    }

    fn propagate_op(&mut self, idx: usize, op: &Op, gd: &[f64]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().1;
                if self.rg(a) {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let at = transpose_raw(self.value(a).data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    self.accumulate(b, db);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.value(a).dims2();
                let da = transpose_raw(gd, n, m);
                self.accumulate(a, da);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, gd.to_vec());
                if self.rg(b) {
                    let bl = self.value(b).len();
                    let mut db = vec![0.0; bl];
                    for (i, v) in gd.iter().enumerate() {
                        db[i % bl] += v;
                    }
                    self.accumulate(b, db);
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let da = gd.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let db = gd.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(b, db);
                }
            }
            &Op::Scale(a, s) => {
                let da = gd.iter().map(|g| g * s).collect();
                self.accumulate(a, da);
            }
            &Op::Gelu(a) => {
                let da = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(a, da);
            }
            &Op::Softmax(a, axis) => {
                let y = &self.nodes[idx].value;
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let yd = y.data();
                let mut da = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| gd[at(i)] * yd[at(i)]).sum();
                        for i in 0..len {
                            da[at(i)] = yd[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                self.accumulate(a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let cols = self.value(gain).len();
                let rows = gd.len() / cols;
                let gv = self.value(gain).data();
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        dx[r * cols + c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gain, dgain);
                self.accumulate(bias, dbias);
            }
            Op::Concat(parts, axis) => {
                let (parts, axis) = (parts.clone(), *axis);
                let shape = self.nodes[idx].value.shape().to_vec();
                let (outer, _, inner) = axis_split(&shape, axis);
                let total_chunk = shape[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(p).shape()[axis] * inner;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total_chunk + offset;
                            dp.extend_from_slice(&gd[base..base + chunk]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                let src = self.value(x).shape().to_vec();
                let (outer, len, inner) = axis_split(&src, axis);
                let width = self.nodes[idx].value.shape()[axis];
                let mut dx = vec![0.0; src.iter().product()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let from = o * width * inner;
                    dx[dst..dst + width * inner].copy_from_slice(&gd[from..from + width * inner]);
                }
                self.accumulate(x, dx);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let (v, d) = self.value(table).dims2();
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += gd[r * d + c];
                    }
                }
                self.accumulate(table, dt);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![gd[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(a, vec![gd[0] / n as f64; n]);
            }
            &Op::SumAxis(a, axis) => {
                let src = self.value(a).shape().to_vec();
                let (outer, len, inner) = axis_split(&src, axis);
                let mut da = vec![0.0; src.iter().product()];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            da[(o * len + i) * inner + j] = gd[o * inner + j];
                        }
                    }
                }
                self.accumulate(a, da);
            }
            &Op::Log(a, floor) => {
                let da = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > floor { g / x } else { 0.0 })
                    .collect();
                self.accumulate(a, da);
            }
            &Op::Exp(a) => {
                let da = gd
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(a, da);
            }
            Op::L2Normalize { x, norms } => {
                let x = *x;
                let y = &self.nodes[idx].value;
                let (rows, cols) = y.dims2();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.accumulate(x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let v = g.constant(t(&[2, 1], &[5.0, 7.0]));
        let out = g.matmul(p, v).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 999.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.check().is_ok());
        assert!((g.value(y).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::filled(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[1, 3], &[4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let gain = g.constant(Tensor::filled(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
        assert!(g.value(y).max_abs_diff(&t(&[1, 2], &[1.0, -1.0])) < 1e-12);

        assert!(matches!(
            g.layer_norm(x, gain, bias, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let c = g.constant(Tensor::scalar(3.0));
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]), true);
        let n = g.l2_normalize(x);
        let l = g.sum(n);
        assert!(matches!(g.check(), Err(Error::NonFinite { op: "l2_normalize", .. })));
        assert!(g.backward(l).is_err());
    }

    #[test]
    fn repeated_backward_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true);
        let b = g.leaf(Tensor::randn(&[4, 2], 1.0, &mut rng), true);
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = g.log(s, 1e-12);
        let l = g.mean(l);
        g.backward(l).unwrap();
        let first = g.grad(a).unwrap().clone();
        g.backward(l).unwrap();
        assert_eq!(&first, g.grad(a).unwrap());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let r = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(r), &[4, 2]);
    }
}
