use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::{axis_extents, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Pointwise {
        x: usize,
        derivative: fn(f64) -> f64,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Transpose(usize),
    Reshape(usize),
    RepeatRows {
        x: usize,
        times: usize,
    },
    Pick {
        x: usize,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A single-threaded tape of tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::current())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads
            .get(&v.0)
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let op = if requires_grad { Op::Leaf } else { Op::Constant };
        self.push(value, op, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Records a parameter as a leaf. Each parameter is recorded once per
    /// graph; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.input(store.value(id).clone(), trainable);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul(a.0, b.0),
            needs,
        ))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&[bs, m, n], out)?,
            Op::BatchMatMul(a.0, b.0),
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        self.push(Tensor::new(&shape, data).expect("zip shape"), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Scale(x.0, c), needs)
    }

    /// Adds `bias` (n values) to every row of `x` along its last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(t, Op::AddBias(x.0, bias.0), needs))
    }

    /// `x @ w + b`, the affine map used by every dense layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let needs = self.needs(&[x.0]);
        self.push(t, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn pointwise(&mut self, x: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Var {
        self.unary(x, f, Op::Pointwise { x: x.0, derivative })
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Index {
                what: op,
                index: axis,
                bound: self.shape(x).len(),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax axis", x, axis)?;
        let mut t = self.value(x).clone();
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        for_each_lane(t.data_mut(), outer, len, inner, |lane| {
            let max = lane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in lane.iter_mut() {
                *v /= total;
            }
        });
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::Softmax { x: x.0, axis }, needs))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax axis", x, axis)?;
        let mut t = self.value(x).clone();
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        for_each_lane(t.data_mut(), outer, len, inner, |lane| {
            let max = lane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in lane.iter_mut() {
                *v -= lse;
            }
        });
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::LogSoftmax { x: x.0, axis }, needs))
    }

    /// Normalizes every vector along the last dimension, then applies
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[]));
        }
        let (v, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup needs at least one id".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let needs = self.needs(&[table.0]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat axis", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat { inputs: ids, axis },
            needs,
        ))
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Index {
                what: "slice end",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, alen, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let data = self.value(x).data();
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), needs)
    }

    /// Sums out `axis`; the result drops that dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::SumAxis { x: x.0, axis },
            needs,
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = data[off + i * n + j];
                }
            }
        }
        let mut oshape = shape;
        oshape.swap(r - 2, r - 1);
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Transpose(x.0), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::Reshape(x.0), needs))
    }

    /// Repeats each row of `[m, n]` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || times == 0 {
            return Err(Error::shape("repeat_rows", &shape, &[times]));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.numel() * times);
        for r in 0..shape[0] {
            for _ in 0..times {
                out.extend_from_slice(t.row(r));
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&[shape[0] * times, shape[1]], out)?,
            Op::RepeatRows { x: x.0, times },
            needs,
        ))
    }

    /// Selects `x[i, indices[i]]` from a `[m, n]` tensor, giving `[m]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(Error::shape("pick", &shape, &[indices.len()]));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(indices.len());
        for (r, &c) in indices.iter().enumerate() {
            if c >= shape[1] {
                return Err(Error::Index {
                    what: "pick column",
                    index: c,
                    bound: shape[1],
                });
            }
            out.push(t.row(r)[c]);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                x: x.0,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients on leaves accumulate
    /// across calls until the graph is dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let mut g = g;
                self.precision.round_slice(&mut g);
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, self.leaf_grads.get(&i)) {
                store.add_grad(id, g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = out.shape()[1];
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, |ga| gemm(m, n, k, g, false, bv, true, ga));
                self.accumulate(grads, b, |gb| gemm(k, m, n, av, true, g, false, gb));
            }
            &Op::BatchMatMul(a, b) => {
                let sa = self.nodes[a].value.shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, |ga| {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            }
            &Op::AddBias(x, b) => {
                self.accumulate(grads, x, |gx| add_into(gx, g));
                self.accumulate(grads, b, |gb| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.nodes[x].value.data();
                self.accumulate(grads, x, |gx| {
                    for j in 0..gx.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = out.data();
                self.accumulate(grads, x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = out.data();
                self.accumulate(grads, x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            &Op::Pointwise { x, derivative } => {
                let xv = self.nodes[x].value.data();
                self.accumulate(grads, x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * derivative(xv[j]);
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let total: f64 = (0..len).map(|k| g[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += g[at(k)] - y[at(k)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gv = self.nodes[*gain].value.data();
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let df = d as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] +=
                                inv_std[r] / df * (df * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &x in inputs {
                    let len = self.nodes[x].value.shape()[*axis];
                    self.accumulate(grads, x, |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut gx[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, alen, inner) = axis_extents(self.nodes[x].value.shape(), axis);
                let len = out.shape()[axis];
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        add_into(
                            &mut gx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            &Op::Mean(x) => {
                let n = self.nodes[x].value.numel() as f64;
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            &Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.nodes[x].value.shape(), axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            add_into(&mut gx[base..base + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let s = out.shape();
                let r = s.len();
                // output is [.., n, m]; input was [.., m, n]
                let (n, m) = (s[r - 2], s[r - 1]);
                let batch = out.numel() / (m * n);
                self.accumulate(grads, x, |gx| {
                    for b in 0..batch {
                        let off = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                gx[off + i * n + j] += g[off + j * m + i];
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, |gx| add_into(gx, g));
            }
            &Op::RepeatRows { x, times } => {
                let n = out.cols();
                self.accumulate(grads, x, |gx| {
                    for (r, row) in g.chunks(n).enumerate() {
                        let src = r / times;
                        add_into(&mut gx[src * n..(src + 1) * n], row);
                    }
                });
            }
            Op::Pick { x, indices } => {
                let n = self.nodes[*x].value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, &c) in indices.iter().enumerate() {
                        gx[r * n + c] += g[r];
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn for_each_lane(
    data: &mut [f64],
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(&mut [f64]),
) {
    if inner == 1 {
        for lane in data.chunks_mut(len).take(outer) {
            f(lane);
        }
        return;
    }
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..len {
                lane[k] = data[(o * len + k) * inner + i];
            }
            f(&mut lane);
            for k in 0..len {
                data[(o * len + k) * inner + i] = lane[k];
            }
        }
    }
}

/// `c += op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
