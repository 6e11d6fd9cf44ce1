use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use super::param::{ParamId, Parameter};
use super::tensor::{numel, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Act(Activation),
    Exp,
    Ln,
    Sqrt,
    Neg,
    Square,
    Softplus,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geo: ConvGeometry,
        batch: usize,
        filters: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        map: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        a: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
        row: usize,
    },
    LogSoftmax {
        a: Var,
        row: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                Unary::Act(Activation::Relu) => "relu",
                Unary::Act(Activation::Sigmoid) => "sigmoid",
                Unary::Act(Activation::Tanh) => "tanh",
                Unary::Exp => "exp",
                Unary::Ln => "ln",
                Unary::Sqrt => "sqrt",
                Unary::Neg => "neg",
                Unary::Square => "square",
                Unary::Softplus => "softplus",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
            },
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "sum",
                ReduceKind::Mean => "mean",
                ReduceKind::Max => "max",
            },
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass. Nodes are appended as operations execute, so
/// the node order is already a topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    buffer_updates: HashMap<ParamId, Vec<f64>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph at the thread's current precision.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            precision: Precision::current(),
            grad_enabled: true,
            params: HashMap::new(),
            grads: Vec::new(),
            buffer_updates: HashMap::new(),
        }
    }

    /// A graph that records values only; nothing in it requires gradients.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.data.clone())
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, values: Vec<f64>) {
        self.buffer_updates.insert(id, values);
    }

    pub fn buffer_update(&self, id: ParamId) -> Option<&[f64]> {
        self.buffer_updates.get(&id).map(Vec::as_slice)
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(&mut data);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Inserts a leaf; it requires gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", format!("{:?} vs {} values", shape, data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn full(&mut self, shape: impl Into<Vec<usize>>, value: f64) -> Var {
        let shape = shape.into();
        let n = numel(&shape);
        self.push(shape, vec![value; n], Op::Leaf, false)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node, so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(&p.tensor);
        self.params.insert(p.id(), v);
        v
    }

    // ---- elementwise --------------------------------------------------

    /// `a ∘ b` where `b` broadcasts onto `a` along trailing axes: `b` may have
    /// lower rank, and each of its extents must equal `a`'s or be 1.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b);
        let map = broadcast_map(&ashape, bshape, kind)?;
        let av = self.value(a);
        let bv = self.value(b);
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match &map {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av.iter().zip(m).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(ashape, data, Op::Binary { kind, a, b, map }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let p = self.precision;
        let x = self.value(a);
        let data: Vec<f64> = match kind {
            Unary::Act(Activation::Relu) => x
                .iter()
                .map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
                .collect(),
            Unary::Act(Activation::Sigmoid) => x
                .iter()
                .map(|&v| {
                    let s = if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    };
                    s.clamp(p.tiny(), p.below_one())
                })
                .collect(),
            Unary::Act(Activation::Tanh) => x
                .iter()
                .map(|&v| v.tanh().clamp(-p.below_one(), p.below_one()))
                .collect(),
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Ln => x.iter().map(|v| v.ln()).collect(),
            Unary::Sqrt => x.iter().map(|v| v.sqrt()).collect(),
            Unary::Neg => x.iter().map(|v| -v).collect(),
            Unary::Square => x.iter().map(|v| v * v).collect(),
            Unary::Softplus => x
                .iter()
                .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
                .collect(),
            Unary::Scale(c) => x.iter().map(|v| v * c).collect(),
            Unary::AddScalar(c) => x.iter().map(|v| v + c).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(shape, data, Op::Unary { kind, a }, rg)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        self.unary(Unary::Act(kind), x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    /// Logistic sigmoid; outputs stay strictly inside (0, 1) even where the
    /// exact value would round to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    /// Hyperbolic tangent; outputs stay strictly inside (-1, 1).
    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), x)
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("needs rank 2, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    /// 2-D cross-correlation with zero padding.
    /// `input: [B×C×H×W]`, `kernel: [F×C×kh×kw]` → `[B×F×H'×W']`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?}, kernel {:?}", si, sk)));
        }
        if si[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", si[1], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (batch, channels, height, width) = (si[0], si[1], si[2], si[3]);
        let (filters, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > height + 2 * padding || kw > width + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} does not fit {height}×{width} with padding {padding}"),
            ));
        }
        let geo = ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let image = channels * height * width;
        let mut out = vec![0.0; batch * filters * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        let (x, w) = (self.value(input), self.value(kernel));
        for b in 0..batch {
            kernels::im2col(&x[b * image..(b + 1) * image], &geo, &mut cols);
            kernels::gemm_nn(
                w,
                &cols,
                &mut out[b * filters * cols_n..(b + 1) * filters * cols_n],
                filters,
                rows,
                cols_n,
            );
        }
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            vec![batch, filters, geo.out_h, geo.out_w],
            out,
            Op::Conv2d {
                input,
                kernel,
                geo,
                batch,
                filters,
            },
            rg,
        ))
    }

    // ---- reductions and reshaping -------------------------------------

    /// Reduces over `axes`. With `keep_dims` the reduced extents stay as 1.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut keep = vec![true; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::AxisOutOfRange { axis, rank });
            }
            if !keep[axis] {
                return Err(Error::shape("reduce", format!("axis {axis} listed twice")));
            }
            keep[axis] = false;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&keep)
            .filter_map(|(&e, &k)| if k { Some(e) } else if keep_dims { Some(1) } else { None })
            .collect();
        let out_n = numel(&out_shape);
        let count = numel(&shape).checked_div(out_n).unwrap_or(0);
        let map = kernels::collapse_map(&shape, &keep);
        let xv = self.value(x);
        let mut argmax = Vec::new();
        let data = match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let mut acc = vec![0.0; out_n];
                for (&v, &o) in xv.iter().zip(&map) {
                    acc[o] += v;
                }
                if kind == ReduceKind::Mean {
                    let c = count as f64;
                    acc.iter_mut().for_each(|v| *v /= c);
                }
                acc
            }
            ReduceKind::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_n];
                argmax = vec![usize::MAX; out_n];
                for (i, (&v, &o)) in xv.iter().zip(&map).enumerate() {
                    // strict comparison keeps the lowest index on ties
                    if argmax[o] == usize::MAX || v > best[o] || (v.is_nan() && !best[o].is_nan()) {
                        best[o] = v;
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out_shape,
            data,
            Op::Reduce {
                kind,
                a: x,
                map,
                count,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keep_dims)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keep_dims)
    }

    pub fn max(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axes, keep_dims)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false).expect("all axes are valid")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: base.len(),
            });
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", s, base)));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                data.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                lens,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let xv = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out_shape,
            data,
            Op::Slice {
                a: x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, Op::Reshape { a: x }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (shape, row) = self.last_axis(x, "softmax")?;
        let mut data = self.value(x).to_vec();
        for r in data.chunks_mut(row) {
            softmax_in_place(r);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, Op::Softmax { a: x, row }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (shape, row) = self.last_axis(x, "log_softmax")?;
        let mut data = self.value(x).to_vec();
        for r in data.chunks_mut(row) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            r.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, Op::LogSoftmax { a: x, row }, rg))
    }

    fn last_axis(&self, x: Var, op: &'static str) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(x).to_vec();
        match shape.last() {
            Some(&row) if row > 0 => Ok((shape, row)),
            _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {:?}", shape))),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`. Gradients are kept on
    /// the graph and read back with [`Graph::grad`] / [`Graph::param_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (parent, mut pg) in contributions {
                self.precision.round_slice(&mut pg);
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each parent that requires grad.
    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, map } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bi = |j: usize| map.as_ref().map_or(j, |m| m[j]);
                if needs(*a) {
                    let ga: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(j, gv)| gv * bv[bi(j)]).collect(),
                        BinaryKind::Div => g.iter().enumerate().map(|(j, gv)| gv / bv[bi(j)]).collect(),
                    };
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for (j, gv) in g.iter().enumerate() {
                        gb[bi(j)] += match kind {
                            BinaryKind::Add => *gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * av[j],
                            BinaryKind::Div => -gv * node.data[j] / bv[bi(j)],
                        };
                    }
                    out.push((*b, gb));
                }
            }
            Op::Unary { kind, a } => {
                if needs(*a) {
                    let x = self.value(*a);
                    let y = &node.data;
                    let ga: Vec<f64> = (0..g.len())
                        .map(|j| {
                            let d = match kind {
                                Unary::Act(Activation::Relu) => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Act(Activation::Sigmoid) => y[j] * (1.0 - y[j]),
                                Unary::Act(Activation::Tanh) => 1.0 - y[j] * y[j],
                                Unary::Exp => y[j],
                                Unary::Ln => 1.0 / x[j],
                                Unary::Sqrt => 0.5 / y[j],
                                Unary::Neg => -1.0,
                                Unary::Square => 2.0 * x[j],
                                Unary::Softplus => sigmoid(x[j]),
                                Unary::Scale(c) => *c,
                                Unary::AddScalar(_) => 1.0,
                            };
                            g[j] * d
                        })
                        .collect();
                    out.push((*a, ga));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(g, self.value(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(self.value(*a), g, &mut gb, k, m, n);
                    out.push((*b, gb));
                }
            }
            Op::Transpose { a, rows, cols } => {
                if needs(*a) {
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[r * cols + c] = g[c * rows + r];
                        }
                    }
                    out.push((*a, ga));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geo,
                batch,
                filters,
            } => {
                let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
                let image = geo.channels * geo.height * geo.width;
                let (x, w) = (self.value(*input), self.value(*kernel));
                let mut gk = needs(*kernel).then(|| vec![0.0; w.len()]);
                let mut gi = needs(*input).then(|| vec![0.0; x.len()]);
                let mut cols = vec![0.0; rows * cols_n];
                for b in 0..*batch {
                    let gb = &g[b * filters * cols_n..(b + 1) * filters * cols_n];
                    if let Some(gk) = gk.as_mut() {
                        kernels::im2col(&x[b * image..(b + 1) * image], geo, &mut cols);
                        kernels::gemm_nt(gb, &cols, gk, *filters, cols_n, rows);
                    }
                    if let Some(gi) = gi.as_mut() {
                        cols.fill(0.0);
                        kernels::gemm_tn(w, gb, &mut cols, rows, *filters, cols_n);
                        kernels::col2im(&cols, geo, &mut gi[b * image..(b + 1) * image]);
                    }
                }
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                if let Some(gk) = gk {
                    out.push((*kernel, gk));
                }
            }
            Op::Reduce {
                kind,
                a,
                map,
                count,
                argmax,
            } => {
                if needs(*a) {
                    let ga = match kind {
                        ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
                        ReduceKind::Mean => {
                            let c = *count as f64;
                            map.iter().map(|&o| g[o] / c).collect()
                        }
                        ReduceKind::Max => {
                            let mut ga = vec![0.0; map.len()];
                            for (o, &src) in argmax.iter().enumerate() {
                                ga[src] += g[o];
                            }
                            ga
                        }
                    };
                    out.push((*a, ga));
                }
            }
            Op::Concat {
                parts,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    if needs(p) {
                        let chunk = len * inner;
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..*outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + chunk]);
                        }
                        out.push((p, gp));
                    }
                    offset += len;
                }
            }
            Op::Slice {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                if needs(*a) {
                    let mut ga = vec![0.0; outer * axis_len * inner];
                    for o in 0..*outer {
                        let dst = (o * axis_len + start) * inner;
                        let src = o * len * inner;
                        ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    out.push((*a, ga));
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
            }
            Op::Softmax { a, row } => {
                if needs(*a) {
                    let y = &node.data;
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out_r) in g.chunks(*row).zip(y.chunks(*row)).zip(ga.chunks_mut(*row)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    out.push((*a, ga));
                }
            }
            Op::LogSoftmax { a, row } => {
                if needs(*a) {
                    let y = &node.data;
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out_r) in g.chunks(*row).zip(y.chunks(*row)).zip(ga.chunks_mut(*row)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, gv), yv) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    out.push((*a, ga));
                }
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(r: &mut [f64]) {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    r.iter_mut().for_each(|v| *v /= total);
}

/// Index map from `a`'s flat indices into `b`, or `None` when the shapes match.
fn broadcast_map(a: &[usize], b: &[usize], kind: BinaryKind) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let fail = || {
        Error::shape(
            match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            format!("{:?} does not broadcast onto {:?}", b, a),
        )
    };
    if b.len() > a.len() {
        return Err(fail());
    }
    let offset = a.len() - b.len();
    let bstrides = kernels::strides(b);
    let mut aligned = vec![0; a.len()];
    for (j, (&be, &bs)) in b.iter().zip(&bstrides).enumerate() {
        let ae = a[offset + j];
        if be == ae {
            aligned[offset + j] = bs;
        } else if be != 1 {
            return Err(fail());
        }
    }
    Ok(Some(kernels::walk_index_map(a, &aligned)))
}
