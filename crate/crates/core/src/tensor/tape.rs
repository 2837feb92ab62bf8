use super::{gemm, numel, permute, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean mask for [`Tape::masked_fill`]; its shape must be a suffix of the
/// filled tensor's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "mask shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Mask { shape, data })
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    GatherLast { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations in execution order; since every node's parents are
/// recorded before it, the tape is already topologically sorted.
///
/// Leaves created with `requires_grad` receive gradients from
/// [`Tape::backward`]; repeated calls accumulate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn suffix_of(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// (outer, len, inner) for iterating a single axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sb, sa) {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn broadcast_zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let width = vb.numel().max(1);
        let data = va
            .data()
            .chunks(width)
            .flat_map(|chunk| chunk.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor {
            shape: va.shape().to_vec(),
            data,
        }
    }

    /// Elementwise `a + b`; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let out = self.broadcast_zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `[..., m, k] × [k, n] → [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let m = if k == 0 { numel(&sa[..sa.len() - 1]) } else { m };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// `[b, m, k] × [b, k, n] → [b, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![bs, m, n],
                data: out,
            },
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::invalid(format!(
                "transpose axes ({d0}, {d1}) out of range for shape {shape:?}"
            )));
        }
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.swap(d0, d1);
        let (data, shape) = permute(self.value(a).data(), &shape, &perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(a, d0, d1), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::invalid(format!("{op}: axis {axis} out of range for {shape:?}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (out[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] -= lse;
                }
            }
        }
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax(a, axis), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = self.value(x).numel() / d.max(1);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
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

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v
                .data()
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
                .collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Rows of `table` (`[vocab, d]`) selected by `ids`; output shape is
    /// `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tshape,
                rhs: ids_shape.to_vec(),
            });
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("embedding id {bad} out of range for vocab {vocab}")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor { shape, data },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &Mask, value: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !suffix_of(&mask.shape, &shape) {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: shape,
                rhs: mask.shape.clone(),
            });
        }
        let width = mask.data.len().max(1);
        let full: Vec<bool> = (0..numel(&shape)).map(|i| mask.data[i % width]).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&full)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::MaskedFill { x, mask: full }, rg))
    }

    /// Picks one entry per row along the last axis.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::invalid("gather_last on a scalar"))?;
        let rows = numel(&shape[..shape.len() - 1]);
        if idx.len() != rows {
            return Err(Error::Shape {
                op: "gather_last",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= width) {
            return Err(Error::invalid(format!("gather index {bad} out of range for width {width}")));
        }
        let v = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &i)| v[r * width + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape[..shape.len() - 1].to_vec(),
                data,
            },
            Op::GatherLast { x, idx: idx.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis(a, axis), rg))
    }

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::invalid("loss is detached from every trainable leaf"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, v) in existing.data.iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*b) {
                    let width = self.value(*b).numel().max(1);
                    let mut gb = vec![0.0; width];
                    for chunk in g.chunks(width) {
                        for (acc, v) in gb.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, gb);
                }
                send(*a, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let width = vb.len().max(1);
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(i, gv)| gv * vb[i % width]).collect();
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; width];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % width] += gv * va[i];
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::MatMul(a, b) => {
                let sb = self.value(*b).shape();
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut ga, false);
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut gb, false);
                    send(*b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::Transpose(a, d0, d1) => {
                let out_shape = node.value.shape();
                let mut perm: Vec<usize> = (0..out_shape.len()).collect();
                perm.swap(*d0, *d1);
                let (ga, _) = permute(g, out_shape, &perm);
                send(*a, ga);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_gy = 0.0;
                        let mut mean_gyh = 0.0;
                        for j in 0..d {
                            let gy = gr[j] * gv[j];
                            mean_gy += gy;
                            mean_gyh += gy * hr[j];
                        }
                        mean_gy /= d as f64;
                        mean_gyh /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] = is * (gr[j] * gv[j] - mean_gy - hr[j] * mean_gyh);
                        }
                    }
                    send(*x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                    send(*gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; d];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                    send(*bias, gb);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect(),
                );
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &x)| {
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                send(*a, ga);
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape();
                let d = shape[1];
                let mut gt = vec![0.0; shape[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                send(*table, gt);
            }
            Op::MaskedFill { x, mask } => {
                send(
                    *x,
                    g.iter().zip(mask).map(|(gv, &m)| if m { 0.0 } else { *gv }).collect(),
                );
            }
            Op::GatherLast { x, idx } => {
                let width = *self.value(*x).shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * width + i] += g[r];
                }
                send(*x, gx);
            }
            Op::SumAll(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.value(*a).shape(), *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            ga[o * len * inner + j * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(*a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    /// Central-difference gradient of `f` at each input, compared with the
    /// tape's gradient. `f` must build a scalar from the given leaves.
    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut tp = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| tp.param(x.clone())).collect();
            let l = f(&mut tp, &vs);
            tp.value(l).item().unwrap()
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Projects an arbitrary-shaped output onto a fixed random direction so
    /// every output element influences the scalar.
    fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, tape.shape(out));
        let w = tape.constant(w);
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(x, 0).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(random(&mut rng, &[2, 5, 3]));
        for axis in 0..3 {
            let s = tape.softmax(x, axis).unwrap();
            let sums = tape.sum_axis(s, axis).unwrap();
            for v in tape.value(sums).data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[3, 4]);
        let i = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let xt = tape.transpose(xv, 0, 1).unwrap();
        // (I·Xᵀᵀ)... keep it simple: Xᵀ·I = Xᵀ
        let y = tape.matmul(xt, i).unwrap();
        let yt = tape.transpose(y, 0, 1).unwrap();
        assert_eq!(tape.value(yt), &x);
    }

    #[test]
    fn backward_hand_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
        let c = tape.constant(Tensor::zeros(&[2]));
        let s = tape.sum(c);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn primitives_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);
        for trial in 0..20u64 {
            let m = rng.gen_range(1..4);
            let k = rng.gen_range(1..5);
            let n = rng.gen_range(1..4);
            let b = rng.gen_range(1..3);
            let cases: Vec<Case> = vec![
                ("matmul", vec![vec![b, m, k], vec![k, n]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.matmul(v[0], v[1]).unwrap(); project(t, o, 1) })),
                ("bmm", vec![vec![b, m, k], vec![b, k, n]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.batch_matmul(v[0], v[1]).unwrap(); project(t, o, 2) })),
                ("add", vec![vec![b, m, k], vec![m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.add(v[0], v[1]).unwrap(); project(t, o, 3) })),
                ("sub", vec![vec![b, m, k], vec![k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.sub(v[0], v[1]).unwrap(); project(t, o, 4) })),
                ("mul", vec![vec![b, m, k], vec![m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.mul(v[0], v[1]).unwrap(); project(t, o, 5) })),
                ("scale", vec![vec![m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.scale(v[0], -1.7); project(t, o, 6) })),
                ("softmax0", vec![vec![b, m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.softmax(v[0], 0).unwrap(); project(t, o, 7) })),
                ("softmax2", vec![vec![b, m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.softmax(v[0], 2).unwrap(); project(t, o, 8) })),
                ("log_softmax1", vec![vec![b, m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.log_softmax(v[0], 1).unwrap(); project(t, o, 9) })),
                ("layer_norm", vec![vec![b, m, k + 1], vec![k + 1], vec![k + 1]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(); project(t, o, 10) })),
                ("gelu", vec![vec![m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.gelu(v[0]); project(t, o, 11) })),
                ("relu", vec![vec![m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.relu(v[0]); project(t, o, 12) })),
                ("transpose", vec![vec![b, m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.transpose(v[0], 0, 2).unwrap(); project(t, o, 13) })),
                ("reshape", vec![vec![b, m, k]], Box::new(move |t: &mut Tape, v: &[Var]| { let o = t.reshape(v[0], &[b * m * k]).unwrap(); project(t, o, 14) })),
                ("embedding", vec![vec![5, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.embedding(v[0], &[0, 3, 3, 1], &[2, 2]).unwrap(); project(t, o, 15) })),
                ("masked_fill", vec![vec![b, m, k]], Box::new(move |t: &mut Tape, v: &[Var]| {
                    let mask = Mask::new(vec![m, k], (0..m * k).map(|i| i % 3 == 0).collect()).unwrap();
                    let o = t.masked_fill(v[0], &mask, -7.0).unwrap(); project(t, o, 16) })),
                ("gather_last", vec![vec![b, m, k]], Box::new(move |t: &mut Tape, v: &[Var]| {
                    let idx: Vec<usize> = (0..b * m).map(|i| i % k).collect();
                    let o = t.gather_last(v[0], &idx).unwrap(); project(t, o, 17) })),
                ("sum_axis", vec![vec![b, m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let o = t.sum_axis(v[0], 1).unwrap(); project(t, o, 18) })),
                ("mean", vec![vec![b, m, k]], Box::new(|t: &mut Tape, v: &[Var]| { let sq = t.mul(v[0], v[0]).unwrap(); t.mean(sq) })),
            ];
            for (name, shapes, f) in cases {
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let err = check_grads(&inputs, f.as_ref());
                assert!(err < 1e-5, "{name} trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let a = tape.param(random(&mut rng, &[4, 6]));
            let w = tape.param(random(&mut rng, &[6, 3]));
            let h = tape.matmul(a, w).unwrap();
            let s = tape.log_softmax(h, 1).unwrap();
            let l = tape.sum(s);
            tape.backward(l).unwrap();
            (tape.value(l).clone(), tape.grad(a).cloned(), tape.grad(w).cloned())
        };
        assert_eq!(run(), run());
    }
}
