use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Sum,
    SumAxis,
    Mean,
    Sigmoid,
    Tanh,
    Relu,
    Elu,
    Abs,
    Concat,
    Slice,
    Broadcast,
    SquaredError,
    Linear,
    GruGates,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum_axis",
            OpKind::Mean => "mean",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Elu => "elu",
            OpKind::Abs => "abs",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Broadcast => "broadcast",
            OpKind::SquaredError => "squared_error",
            OpKind::Linear => "linear",
            OpKind::GruGates => "gru_gates",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var, f64),
    Abs(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    SquaredError(Var, Var),
    Linear(Var, Var, Var),
    /// Keeps the activated gates `[r | z | n]` for the reverse pass.
    GruGates {
        gx: Var,
        gh: Var,
        h: Var,
        gates: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Sum(..) => OpKind::Sum,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::Mean(..) => OpKind::Mean,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Elu(..) => OpKind::Elu,
            Op::Abs(..) => OpKind::Abs,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::SquaredError(..) => OpKind::SquaredError,
            Op::Linear(..) => OpKind::Linear,
            Op::GruGates { .. } => OpKind::GruGates,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Sum(x)
            | Op::SumAxis(x, _)
            | Op::Mean(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Elu(x, _)
            | Op::Abs(x)
            | Op::Broadcast(x)
            | Op::Slice { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::GruGates { gx, gh, h, .. } => vec![*gx, *gh, *h],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a forward computation. Node `k` only ever refers to
/// nodes with smaller ids, so creation order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf holding `value`. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(Op::Leaf, value, requires_grad))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; `None` for nodes that do not require grad or
    /// before any backward pass reached them.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// True when some path of recorded ops leads from `from` to `to`.
    pub fn depends_on(&self, to: Var, from: Var) -> bool {
        if to.0 < from.0 {
            return false;
        }
        let mut reach = vec![false; to.0 + 1];
        reach[from.0] = true;
        for k in from.0 + 1..=to.0 {
            reach[k] = self.nodes[k].op.inputs().iter().any(|i| reach[i.0]);
        }
        reach[to.0]
    }

    /// Leaves created with `requires_grad`, in creation order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(k, _)| Var(k))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    fn record(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    fn dims2(&self, op: OpKind, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::shape(op.name(), &[self.shape(v)]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(OpKind::MatMul, a)?;
        let (k2, n) = self.dims2(OpKind::MatMul, b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
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
            false,
        );
        self.record(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op.kind().name(), &[va.shape(), vb.shape()]));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.record(op, value)
    }

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        self.record(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Element-wise `(a - b)^2`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::SquaredError(a, b), a, b, |x, y| (x - y) * (x - y))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", &[v.shape()]));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.record(Op::Mean(x), Tensor::scalar(s))
    }

    /// Sums a matrix along `axis`, keeping that axis with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims2(OpKind::SumAxis, x)?;
        let data = self.value(x).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in data.chunks_exact(c.max(1)).take(r) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new(vec![1, c], out)?
            }
            1 => {
                let out = (0..r).map(|i| data[i * c..(i + 1) * c].iter().sum()).collect();
                Tensor::new(vec![r, 1], out)?
            }
            _ => return Err(Error::shape("sum_axis", &[self.shape(x)])),
        };
        self.record(Op::SumAxis(x, axis), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Tanh(x), x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Relu(x), x, |v| v.max(0.0))
    }

    /// `x` for `x > 0`, `alpha * (exp(x) - 1)` otherwise.
    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.map(
            Op::Elu(x, alpha),
            x,
            move |v| {
                if v > 0.0 {
                    v
                } else {
                    alpha * v.exp_m1()
                }
            },
        )
    }

    /// Element-wise absolute value. Its gradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Abs(x), x, f64::abs)
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() || axis > 1 {
            return Err(Error::invalid("concat needs inputs and axis 0 or 1"));
        }
        let mut dims = Vec::with_capacity(xs.len());
        for &x in xs {
            dims.push(self.dims2(OpKind::Concat, x)?);
        }
        let mismatch = || {
            let shapes: Vec<&[usize]> = xs.iter().map(|&x| self.shape(x)).collect();
            Error::shape("concat", &shapes)
        };
        let value = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(mismatch());
            }
            let mut data = Vec::new();
            for &x in xs {
                data.extend_from_slice(self.value(x).data());
            }
            let r = dims.iter().map(|d| d.0).sum();
            Tensor::new(vec![r, c], data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(mismatch());
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for (&x, d) in xs.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(x).data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::new(vec![r, c], data)?
        };
        self.record(Op::Concat(xs.to_vec(), axis), value)
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(OpKind::Slice, x)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(Error::shape("slice", &[self.shape(x)])),
        };
        if start > end || end > extent {
            return Err(Error::shape("slice", &[self.shape(x), &[start, end]]));
        }
        let data = self.value(x).data();
        let value = if axis == 0 {
            Tensor::new(vec![end - start, c], data[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&data[i * c + start..i * c + end]);
            }
            Tensor::new(vec![r, w], out)?
        };
        self.record(Op::Slice { x, axis, start }, value)
    }

    /// Repeats `x` to `shape`. Either `x` has one element, or it has the same
    /// rank as `shape` with every dimension equal to the target or 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let target_numel: usize = shape.iter().product();
        let data = if src.numel() == 1 {
            vec![src.item(); target_numel]
        } else {
            let ok = src.shape().len() == shape.len() && src.shape().iter().zip(shape).all(|(&s, &t)| s == t || s == 1);
            if !ok {
                return Err(Error::shape("broadcast", &[src.shape(), shape]));
            }
            match broadcast_pattern(src.shape(), shape) {
                Some(Pattern::Rows(r)) => src.data().repeat(r),
                Some(Pattern::Cols(c)) => src.data().iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect(),
                None => {
                    let strides = broadcast_strides(src.shape());
                    (0..target_numel)
                        .map(|flat| src.data()[source_index(flat, shape, src.shape(), &strides)])
                        .collect()
                }
            }
        };
        let value = Tensor::new(shape.to_vec(), data)?;
        self.record(Op::Broadcast(x), value)
    }

    /// `x w + b` with the row vector `b` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(OpKind::Linear, x)?;
        let (k2, n) = self.dims2(OpKind::Linear, w)?;
        if k != k2 || self.shape(b) != [1, n] {
            return Err(Error::shape("linear", &[self.shape(x), self.shape(w), self.shape(b)]));
        }
        let mut out = self.value(b).data().repeat(m);
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        self.record(Op::Linear(x, w, b), Tensor::new(vec![m, n], out)?)
    }

    /// GRU gate arithmetic on the pre-activations `gx = x W + b` and
    /// `gh = h U + c` (both `[rows, 3H]`, gate blocks ordered `r, z, n`) and
    /// the previous state `h [rows, H]`:
    /// `r = sigmoid(gx_r + gh_r)`, `z = sigmoid(gx_z + gh_z)`,
    /// `n = tanh(gx_n + r * gh_n)`, `h' = n + z * (h - n)`.
    pub fn gru_gates(&mut self, gx: Var, gh: Var, h: Var) -> Result<Var> {
        let (rows, hd) = self.dims2(OpKind::GruGates, h)?;
        if self.shape(gx) != [rows, 3 * hd] || self.shape(gh) != [rows, 3 * hd] {
            return Err(Error::shape(
                "gru_gates",
                &[self.shape(gx), self.shape(gh), self.shape(h)],
            ));
        }
        let (vx, vh, vprev) = (self.value(gx).data(), self.value(gh).data(), self.value(h).data());
        let mut gates = vec![0.0; rows * 3 * hd];
        let mut out = vec![0.0; rows * hd];
        for i in 0..rows {
            let o = i * 3 * hd;
            for j in 0..hd {
                let r = sigmoid(vx[o + j] + vh[o + j]);
                let z = sigmoid(vx[o + hd + j] + vh[o + hd + j]);
                let n = (vx[o + 2 * hd + j] + r * vh[o + 2 * hd + j]).tanh();
                gates[o + j] = r;
                gates[o + hd + j] = z;
                gates[o + 2 * hd + j] = n;
                out[i * hd + j] = n + z * (vprev[i * hd + j] - n);
            }
        }
        self.record(Op::GruGates { gx, gh, h, gates }, Tensor::new(vec![rows, hd], out)?)
    }

    /// Reverse pass from a scalar `root`. Gradients are added to whatever
    /// earlier passes left behind; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::invalid("backward on an empty graph"));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::shape("backward", &[self.shape(root)]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for k in (0..=root.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            self.propagate(k, &g, &mut grads);
            grads[k] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let (true, Some(g)) = (node.requires_grad, g) else {
                continue;
            };
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[k];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, kk) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.requires_grad(*a) {
                    let ga = self.slot(grads, *a);
                    gemm(m, n, kk, g, false, self.value(*b).data(), true, ga, true);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    gemm(kk, m, n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                self.accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let d = || g.iter().zip(va.iter().zip(vb)).map(|(g, (x, y))| 2.0 * g * (x - y));
                self.accumulate(grads, *a, d());
                self.accumulate(grads, *b, d().map(|v| -v));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / n as f64;
                self.accumulate(grads, *x, std::iter::repeat_n(v, n));
            }
            Op::SumAxis(x, axis) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let axis = *axis;
                self.accumulate(
                    grads,
                    *x,
                    (0..r * c).map(|flat| if axis == 0 { g[flat % c] } else { g[flat / c] }),
                );
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(vx).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::Elu(x, alpha) => {
                let vx = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(vx.iter().zip(out))
                        .map(|(g, (v, y))| if *v > 0.0 { *g } else { g * (y + alpha) }),
                );
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(vx).map(|(g, v)| {
                        if *v > 0.0 {
                            *g
                        } else if *v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Concat(xs, axis) => {
                let (r, c) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let (xr, xc) = self.value(x).dims2().unwrap();
                    if self.requires_grad(x) {
                        let slot = self.slot(grads, x);
                        if *axis == 0 {
                            for (s, v) in slot.iter_mut().zip(&g[offset * c..(offset + xr) * c]) {
                                *s += v;
                            }
                        } else {
                            for i in 0..r {
                                let src = &g[i * c + offset..i * c + offset + xc];
                                for (s, v) in slot[i * xc..(i + 1) * xc].iter_mut().zip(src) {
                                    *s += v;
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { xr } else { xc };
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.requires_grad(*x) {
                    return;
                }
                let (_, c) = self.value(*x).dims2().unwrap();
                let (or, oc) = node.value.dims2().unwrap();
                let slot = self.slot(grads, *x);
                if *axis == 0 {
                    for (s, v) in slot[start * c..(start + or) * c].iter_mut().zip(g) {
                        *s += v;
                    }
                } else {
                    for i in 0..or {
                        let dst = &mut slot[i * c + start..i * c + start + oc];
                        for (s, v) in dst.iter_mut().zip(&g[i * oc..(i + 1) * oc]) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Linear(x, w, b) => {
                let (m, kk) = self.value(*x).dims2().unwrap();
                let n = self.value(*w).dims2().unwrap().1;
                if self.requires_grad(*x) {
                    let gx = self.slot(grads, *x);
                    gemm(m, n, kk, g, false, self.value(*w).data(), true, gx, true);
                }
                if self.requires_grad(*w) {
                    let gw = self.slot(grads, *w);
                    gemm(kk, m, n, self.value(*x).data(), true, g, false, gw, true);
                }
                if self.requires_grad(*b) {
                    let gb = self.slot(grads, *b);
                    for row in g.chunks_exact(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::GruGates { gx, gh, h, gates } => {
                let (rows, hd) = self.value(*h).dims2().unwrap();
                let (vh, vprev) = (self.value(*gh).data(), self.value(*h).data());
                let mut d_gx = vec![0.0; rows * 3 * hd];
                let mut d_gh = vec![0.0; rows * 3 * hd];
                let mut d_prev = vec![0.0; rows * hd];
                for i in 0..rows {
                    let o = i * 3 * hd;
                    for j in 0..hd {
                        let (r, z, n) = (gates[o + j], gates[o + hd + j], gates[o + 2 * hd + j]);
                        let gout = g[i * hd + j];
                        d_prev[i * hd + j] = gout * z;
                        let dz = gout * (vprev[i * hd + j] - n) * z * (1.0 - z);
                        let dn = gout * (1.0 - z) * (1.0 - n * n);
                        let dr = dn * vh[o + 2 * hd + j] * r * (1.0 - r);
                        d_gx[o + j] = dr;
                        d_gh[o + j] = dr;
                        d_gx[o + hd + j] = dz;
                        d_gh[o + hd + j] = dz;
                        d_gx[o + 2 * hd + j] = dn;
                        d_gh[o + 2 * hd + j] = dn * r;
                    }
                }
                self.accumulate(grads, *gx, d_gx.into_iter());
                self.accumulate(grads, *gh, d_gh.into_iter());
                self.accumulate(grads, *h, d_prev.into_iter());
            }
            Op::Broadcast(x) => {
                if !self.requires_grad(*x) {
                    return;
                }
                let src_shape = self.value(*x).shape().to_vec();
                let target = node.value.shape().to_vec();
                let slot = self.slot(grads, *x);
                if slot.len() == 1 {
                    slot[0] += g.iter().sum::<f64>();
                    return;
                }
                match broadcast_pattern(&src_shape, &target) {
                    Some(Pattern::Rows(_)) => {
                        for row in g.chunks_exact(slot.len()) {
                            for (s, v) in slot.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                    }
                    Some(Pattern::Cols(c)) => {
                        for (s, row) in slot.iter_mut().zip(g.chunks_exact(c)) {
                            *s += row.iter().sum::<f64>();
                        }
                    }
                    None => {
                        let strides = broadcast_strides(&src_shape);
                        for (flat, v) in g.iter().enumerate() {
                            slot[source_index(flat, &target, &src_shape, &strides)] += v;
                        }
                    }
                }
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => {
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
            empty => *empty = Some(g.collect()),
        }
    }
}

enum Pattern {
    /// `[1, c] -> [r, c]`
    Rows(usize),
    /// `[r, 1] -> [r, c]`
    Cols(usize),
}

fn broadcast_pattern(src: &[usize], target: &[usize]) -> Option<Pattern> {
    match (src, target) {
        ([1, c], [r, tc]) if c == tc => Some(Pattern::Rows(*r)),
        ([r, 1], [tr, c]) if r == tr => Some(Pattern::Cols(*c)),
        _ => None,
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn source_index(mut flat: usize, target: &[usize], src: &[usize], src_strides: &[usize]) -> usize {
    let mut idx = 0;
    for d in (0..target.len()).rev() {
        let coord = flat % target[d];
        flat /= target[d];
        if src[d] != 1 {
            idx += coord * src_strides[d];
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity_is_noop() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let a = g.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 7.0, 1e-3])).unwrap();
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-2.0, 0.0, 3.0])).unwrap();
        let a = g.abs(x).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 0.0, 3.0]);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let big = g.constant(t(&[1, 1], &[1e200])).unwrap();
        assert!(matches!(g.mul(big, big), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn abs_gradient_is_sign_with_zero_at_origin() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[-1.0, 2.0, 0.0])).unwrap();
        let a = g.abs(w).unwrap();
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[0.3, -0.7])).unwrap();
        let y = g.tanh(x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        let once = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.backward(x).is_err());
        assert!(Graph::new().backward(Var(0)).is_err());
    }

    #[test]
    fn ops_do_not_touch_inputs_and_are_topological() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, -4.0])).unwrap();
        let before = g.value(a).clone();
        let b = g.relu(a).unwrap();
        let c = g.matmul(b, a).unwrap();
        let d = g.broadcast(a, &[2, 2]).unwrap();
        let e = g.add(c, d).unwrap();
        let s = g.mean(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.value(a), &before);
        for k in 0..g.len() {
            for i in g.inputs(Var(k)) {
                assert!(i.id() < k);
            }
        }
        assert!(g.depends_on(s, a));
        assert!(!g.depends_on(a, s));
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let mut g = Graph::new();
        let r = g.param(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let c = g.param(t(&[2, 1], &[10.0, 20.0])).unwrap();
        let br = g.broadcast(r, &[2, 3]).unwrap();
        let bc = g.broadcast(c, &[2, 3]).unwrap();
        assert_eq!(g.value(br).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.value(bc).data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
        let m = g.mul(br, bc).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(r).unwrap().data(), &[30.0, 30.0, 30.0]);
        assert_eq!(g.grad(c).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = g.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let rows = g.concat(&[b, b], 0).unwrap();
        let tail = g.slice(rows, 0, 2, 4).unwrap();
        assert_eq!(g.value(tail), g.value(b));
        let s = g.sum(back).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[1.0; 4]);
        assert!(g.grad(a).is_none() || g.grad(a).unwrap().data() == [0.0, 0.0]);
    }
}
