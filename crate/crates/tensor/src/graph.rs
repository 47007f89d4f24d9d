use ndarray::{concatenate, linalg::general_mat_mul, Axis, IxDyn, Zip};

use crate::kernels;
use crate::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Huber(Var, f64),
    Sum(Var),
    SumAxes(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BatchMatMul(Var, Var),
    Softmax(Var),
    Diff(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations. Build it forward, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

fn zip_with(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let av = a.broadcast(IxDyn(shape)).expect("broadcastable");
    let bv = b.broadcast(IxDyn(shape)).expect("broadcastable");
    let mut out = Tensor::zeros(IxDyn(shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `g` over the axes along which an operand of `shape` was broadcast.
fn reduce_to(mut g: Tensor, shape: &[usize]) -> Tensor {
    for (axis, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), v)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn batch_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let m = if ta { a3.shape()[2] } else { a3.shape()[1] };
    let p = if tb { b3.shape()[1] } else { b3.shape()[2] };
    let batch = a3.shape()[0];
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, p));
    for i in 0..batch {
        let ai = a3.index_axis(Axis(0), i);
        let bi = b3.index_axis(Axis(0), i);
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        let mut oi = out.index_axis_mut(Axis(0), i);
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut oi);
    }
    out.into_dyn()
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`, for scalar-valued nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.iter().next().expect("non-empty tensor")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let value = zip_with(self.value(a), self.value(b), &shape, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a, b), rg))
    }

    /// Elementwise sum with broadcasting over size-1 axes (equal ranks).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(
            a,
            move |x| {
                let ax = x.abs();
                if ax <= delta {
                    0.5 * x * x
                } else {
                    delta * (ax - 0.5 * delta)
                }
            },
            Op::Huber(a, delta),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let mut value = self.value(a).clone();
        for &ax in axes {
            if ax >= value.ndim() {
                return Err(TensorError::InvalidArgument {
                    op: "sum_axes",
                    msg: format!("axis {ax} out of range for {:?}", value.shape()),
                });
            }
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxes(a), rg))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&ax| self.shape(a).get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    /// 2-D cross-correlation, `x`: (N,Ci,H,W), `w`: (Co,Ci,kh,kw), `b`: (Co).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = kernels::max_pool2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() == 4 && s[2] == out_h && s[3] == out_w {
            return Ok(x);
        }
        let value = kernels::resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(axis), &views).map_err(|_| TensorError::ShapeMismatch {
            op: "concat",
            lhs: self.shape(parts[0]).to_vec(),
            rhs: parts.get(1).map_or(vec![], |&p| self.shape(p).to_vec()),
        })?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value.as_standard_layout().into_owned(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.len() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = src.clone().into_shape_with_order(IxDyn(shape)).unwrap();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..src.ndim()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} is not a permutation for rank {}", src.ndim()),
            });
        }
        let value = src
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Batched matrix product of (B,M,K) and (B,K,P).
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let value = batch_matmul(self.value(a), self.value(b), false, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchMatMul(a, b), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let last = Axis(value.ndim().saturating_sub(1));
        for mut lane in value.lanes_mut(last) {
            let m = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Forward difference along `axis` with a zero last slice.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(x).ndim() {
            return Err(TensorError::InvalidArgument {
                op: "forward_diff",
                msg: format!("axis {axis} out of range"),
            });
        }
        let value = kernels::forward_diff(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Diff(x, axis), rg))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(rv.raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contrib) in self.local_grads(i, &g) {
                if !self.rg(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let v = |x: Var| &self.nodes[x.0].value;
        let want = |x: Var| self.rg(x);
        let map2 = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &xv| *o = f(*o, xv));
            out
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g.clone(), v(*a).shape())),
                (*b, reduce_to(g.clone(), v(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g.clone(), v(*a).shape())),
                (*b, reduce_to(g.mapv(|x| -x), v(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut out = vec![];
                if want(*a) {
                    out.push((*a, reduce_to(zip_with(g, v(*b), g.shape(), |g, b| g * b), v(*a).shape())));
                }
                if want(*b) {
                    out.push((*b, reduce_to(zip_with(g, v(*a), g.shape(), |g, a| g * a), v(*b).shape())));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = vec![];
                if want(*a) {
                    out.push((*a, reduce_to(zip_with(g, v(*b), g.shape(), |g, b| g / b), v(*a).shape())));
                }
                if want(*b) {
                    // d(a/b)/db = -y/b
                    let gy = zip_with(g, y, g.shape(), |g, y| g * y);
                    out.push((*b, reduce_to(zip_with(&gy, v(*b), g.shape(), |gy, b| -gy / b), v(*b).shape())));
                }
                out
            }
            Op::Scale(a, k) => vec![(*a, g.mapv(|x| x * k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => vec![(*a, map2(v(*a), &|g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, map2(y, &|g, s| g * s * (1.0 - s)))],
            Op::Softplus(a) => vec![(*a, map2(v(*a), &|g, x| g * sigmoid(x)))],
            Op::Exp(a) => vec![(*a, map2(y, &|g, e| g * e))],
            Op::Ln(a) => vec![(*a, map2(v(*a), &|g, x| g / x))],
            Op::Abs(a) => vec![(*a, map2(v(*a), &|g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }))],
            Op::Square(a) => vec![(*a, map2(v(*a), &|g, x| 2.0 * x * g))],
            Op::Huber(a, d) => {
                let d = *d;
                vec![(*a, map2(v(*a), &move |g, x| g * x.clamp(-d, d)))]
            }
            Op::Sum(a) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                vec![(*a, Tensor::from_elem(v(*a).raw_dim(), s))]
            }
            Op::SumAxes(a) => {
                let full = g.broadcast(v(*a).raw_dim()).expect("keepdims").to_owned();
                vec![(*a, full)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let want_b = b.is_some_and(&want);
                let cg = kernels::conv2d_backward(
                    v(*x),
                    v(*w),
                    g,
                    *stride,
                    *pad,
                    (want(*x), want(*w), want_b),
                )
                .expect("shapes validated in forward");
                let mut out = vec![];
                if let Some(dx) = cg.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = cg.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db.into_shape_with_order(v(*b).raw_dim()).unwrap()));
                }
                out
            }
            Op::MaxPool2 { x, argmax } => {
                vec![(*x, kernels::max_pool2_backward(v(*x).shape(), argmax, g))]
            }
            Op::Resize(x) => vec![(*x, kernels::resize_bilinear_backward(v(*x).shape(), g))],
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = v(p).shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), (offset..offset + len).into())
                            .to_owned();
                        offset += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Reshape(x) => vec![(
                *x,
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(v(*x).raw_dim())
                    .unwrap(),
            )],
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(
                    *x,
                    g.clone()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned(),
                )]
            }
            Op::BatchMatMul(a, b) => {
                let mut out = vec![];
                if want(*a) {
                    out.push((*a, batch_matmul(g, v(*b), false, true)));
                }
                if want(*b) {
                    out.push((*b, batch_matmul(v(*a), g, true, false)));
                }
                out
            }
            Op::Softmax(x) => {
                let mut dx = zip_with(g, y, g.shape(), |g, y| g * y);
                let last = Axis(dx.ndim().saturating_sub(1));
                let dot = dx.sum_axis(last).insert_axis(last);
                Zip::from(&mut dx)
                    .and(y)
                    .and_broadcast(&dot)
                    .for_each(|d, &y, &s| *d -= y * s);
                vec![(*x, dx)]
            }
            Op::Diff(x, axis) => vec![(*x, kernels::forward_diff_adjoint(g, *axis))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_difference, relative_error};

    fn t(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |i| {
            let k: usize = ndarray::Dimension::slice(&i).iter().enumerate().map(|(a, b)| (a + 1) * 7 * b + a).sum();
            ((k as f64) * seed + 0.3).sin()
        })
    }

    /// Checks every input element of a unary scalar-valued graph builder.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = t(shape, 0.77);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        for idx in 0..x0.len() {
            let numeric = central_difference(
                |v| {
                    let mut xp = x0.clone();
                    xp.as_slice_mut().unwrap()[idx] = v;
                    let mut g = Graph::new();
                    let x = g.constant(xp);
                    let y = build(&mut g, x);
                    g.scalar(y)
                },
                x0.as_slice().unwrap()[idx],
                1e-6,
            );
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                relative_error(a, numeric, 1e-8) < 1e-5,
                "element {idx}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        check_op(&[2, 3], |g, x| {
            let s = g.sigmoid(x);
            let sp = g.softplus(x);
            let e = g.exp(sp);
            let l = g.ln(e);
            let h = g.huber(x, 0.4);
            let a = g.mul(s, l).unwrap();
            let b = g.add(a, h).unwrap();
            let c = g.square(b);
            g.sum(c)
        });
    }

    #[test]
    fn broadcast_gradients() {
        let base = t(&[2, 3, 2, 2], 0.31);
        check_op(&[2, 3, 1, 1], move |g, x| {
            let b = g.constant(base.clone());
            let m = g.mul(b, x).unwrap();
            let den = g_add1(g, x);
            let d = g.div(m, den).unwrap();
            let s = g.sub(d, x).unwrap();
            let q = g.square(s);
            g.mean(q)
        });
    }

    fn g_add1(g: &mut Graph, x: Var) -> Var {
        let sq = g.square(x);
        g.add_scalar(sq, 1.0)
    }

    #[test]
    fn conv_pool_resize_gradients() {
        let w0 = t(&[2, 3, 3, 3], 0.13);
        check_op(&[1, 3, 6, 6], move |g, x| {
            let w = g.constant(w0.clone());
            let c = g.conv2d(x, w, None, 1, 1).unwrap();
            let p = g.max_pool2(c).unwrap();
            let r = g.resize_bilinear(p, 5, 4).unwrap();
            let q = g.square(r);
            g.sum(q)
        });
    }

    #[test]
    fn attention_style_gradients() {
        check_op(&[1, 3, 4], |g, x| {
            let xt = g.permute(x, &[0, 2, 1]).unwrap();
            let logits = g.batch_matmul(xt, x).unwrap();
            let a = g.softmax(logits);
            let out = g.batch_matmul(x, a).unwrap();
            let r = g.reshape(out, &[1, 12]).unwrap();
            let cat = g.concat(&[r, r], 1).unwrap();
            let sq = g.square(cat);
            let s = g.sum_axes(sq, &[1]).unwrap();
            g.sum(s)
        });
    }

    #[test]
    fn diff_abs_gradients() {
        check_op(&[1, 3, 3], |g, x| {
            let dx = g.forward_diff(x, 2).unwrap();
            let dy = g.forward_diff(x, 1).unwrap();
            let a = g.abs(dx);
            let b = g.square(dy);
            let s = g.add(a, b).unwrap();
            let m = g.mean_axes(s, &[1, 2]).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], 0.5));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // Only the non-detached factor contributes: dy/dx = d = x.
        assert_eq!(grads.get(x).unwrap(), g.value(x));
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 5], 3.1).mapv(|v| 30.0 * v));
        let s = g.softmax(x);
        for row in g.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], 0.1));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], 0.1));
        let b = g.constant(t(&[3, 2], 0.1));
        assert!(g.add(a, b).is_err());
    }
}
