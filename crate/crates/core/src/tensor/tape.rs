use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::value::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Pad { input: Var, before: Vec<usize> },
    Gather { input: Var, axis: usize, index: Arc<Vec<usize>> },
    AddBias { input: Var, bias: Var, axis: usize },
    Conv2d { input: Var, kernel: Var, stride: (usize, usize), pad: (usize, usize) },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MatMul(Var, Var),
    LayerNorm { input: Var, gain: Var, shift: Var, mean: Vec<T>, rstd: Vec<T> },
    Softmax { input: Var, axis: usize },
    BoxFilter { input: Var, window: [usize; 3] },
    Scan(Box<super::scan::ScanRecord<T>>),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only record of a forward computation; replayed in reverse by
/// [`Tape::backward`]. Every node's inputs precede it.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a).values(), self.value(b).values());
        let data = x.iter().zip(y.iter()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &str, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, op, &[a], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |p, q| p + q);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |p, q| p - q);
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |p, q| p * q);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let out = self.zip_map(a, b, |p, q| p / q);
        self.push(out, Op::Div(a, b), &[a, b], "div")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), "scale", |v| v * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), "add_scalar", |v| v + c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", |v| v.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), "log", |v| v.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), "silu", |v| v * sigmoid(v))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), "softplus", softplus)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.value(a).sum() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Metadata-only reorder; the output shares storage with the input.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        self.push(out, Op::Permute(a, axes.to_vec()), &[a], "permute")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: shape {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        let vals: Vec<_> = inputs.iter().map(|&v| self.value(v).values()).collect();
        for o in 0..outer {
            for (v, src) in inputs.iter().zip(&vals) {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&src[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("slice [{start}, {}) of axis {axis} in {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).values();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        self.push(out, Op::Slice { input: a, axis, start }, &[a], "slice")
    }

    /// Constant zero padding; `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if pads.len() != shape.len() {
            return Err(dim_err!("pad spec {pads:?} does not match rank {}", shape.len()));
        }
        let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(&e, &(b, f))| e + b + f).collect();
        let before: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let src = self.value(a).values();
        for_each_embedded(&shape, &out_shape, &before, |src_i, dst_i| data[dst_i] = src[src_i]);
        drop(src);
        let out = Tensor::from_parts(out_shape, data);
        self.push(out, Op::Pad { input: a, before }, &[a], "pad")
    }

    /// Selects positions `index` along `axis`; repeated indices are allowed.
    pub fn gather(&mut self, a: Var, axis: usize, index: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index.is_empty() {
            return Err(dim_err!("gather on axis {axis} of {shape:?}"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[axis]) {
            return Err(dim_err!("gather index {bad} out of extent {}", shape[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).values();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index.iter() {
                let base = (o * shape[axis] + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        drop(src);
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let out = Tensor::from_parts(out_shape, data);
        self.push(out, Op::Gather { input: a, axis, index }, &[a], "gather")
    }

    /// Adds a rank-1 `bias` broadcast along `axis` of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(dim_err!(
                "bias {:?} cannot broadcast over axis {axis} of {shape:?}",
                self.shape(bias)
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let b = self.value(bias).values();
        let data = self
            .value(a)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % ext])
            .collect();
        drop(b);
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::AddBias { input: a, bias, axis }, &[a, bias], "add_bias")
    }

    /// Reverse pass seeded with 1 on a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward on non-scalar of shape {:?} needs an explicit seed",
                self.shape(output)
            )));
        }
        let seed = Tensor::ones(self.shape(output));
        self.backward_with_seed(output, &seed)
    }

    /// Reverse pass from `output` with upstream gradient `seed`. Leaf gradients
    /// accumulate across calls until [`Tape::zero_grad`].
    pub fn backward_with_seed(&mut self, output: Var, seed: &Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(dim_err!(
                "seed shape {:?} vs output {:?}",
                seed.shape(),
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at leaf {i}, element {bad}")));
                }
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, gi) in self.input_grads(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.value(v).values();
        let map1 = |v: Var, f: &dyn Fn(T, T) -> T| -> Vec<(Var, Vec<T>)> {
            let x = val(v);
            vec![(v, g.iter().zip(x.iter()).map(|(&gi, &xi)| f(gi, xi)).collect())]
        };
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect()),
                    (*b, g.iter().zip(x.iter()).map(|(&gi, &xi)| gi * xi).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y.iter()).map(|(&gi, &yi)| gi / yi).collect()),
                    (
                        *b,
                        g.iter()
                            .zip(x.iter().zip(y.iter()))
                            .map(|(&gi, (&xi, &yi))| -gi * xi / (yi * yi))
                            .collect(),
                    ),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Exp(a) => {
                let y = out.values();
                vec![(*a, g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect())]
            }
            Op::Log(a) => map1(*a, &|gi, xi| gi / xi),
            Op::Sigmoid(a) => {
                let y = out.values();
                vec![(*a, g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect())]
            }
            Op::Silu(a) => map1(*a, &|gi, xi| {
                let s = sigmoid(xi);
                gi * (s + xi * s * (T::one() - s))
            }),
            Op::Softplus(a) => map1(*a, &|gi, xi| gi * sigmoid(xi)),
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / T::from_usize(n).unwrap(); n])]
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                vec![(*a, gt.permute(&inverse)?.to_vec())]
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs.iter().map(|&v| Vec::with_capacity(self.value(v).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, &v) in inputs.iter().enumerate() {
                        let len = self.shape(v)[*axis] * inner;
                        parts[k].extend_from_slice(&g[pos..pos + len]);
                        pos += len;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut gi = vec![T::zero(); self.value(*input).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, gi)]
            }
            Op::Pad { input, before } => {
                let shape = self.shape(*input);
                let mut gi = vec![T::zero(); self.value(*input).numel()];
                for_each_embedded(shape, out.shape(), before, |s, d| gi[s] = g[d]);
                vec![(*input, gi)]
            }
            Op::Gather { input, axis, index } => {
                let shape = self.shape(*input);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gi = vec![T::zero(); self.value(*input).numel()];
                let mut pos = 0;
                for o in 0..outer {
                    for &k in index.iter() {
                        let base = (o * shape[*axis] + k) * inner;
                        for j in 0..inner {
                            gi[base + j] += g[pos + j];
                        }
                        pos += inner;
                    }
                }
                vec![(*input, gi)]
            }
            Op::AddBias { input, bias, axis } => {
                let shape = out.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let ext = shape[*axis];
                let mut gb = vec![T::zero(); ext];
                for (i, &gv) in g.iter().enumerate() {
                    gb[(i / inner) % ext] += gv;
                }
                vec![(*input, g.to_vec()), (*bias, gb)]
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                super::nn::conv2d_backward(self, *input, *kernel, *stride, *pad, g)
            }
            Op::Linear { input, weight, bias } => super::nn::linear_backward(self, *input, *weight, *bias, g),
            Op::MatMul(a, b) => super::nn::matmul_backward(self, *a, *b, g),
            Op::LayerNorm { input, gain, shift, mean, rstd } => {
                super::nn::layer_norm_backward(self, *input, *gain, *shift, mean, rstd, g)
            }
            Op::Softmax { input, axis } => super::nn::softmax_backward(out, *input, *axis, g),
            Op::BoxFilter { input, window } => super::nn::box_filter_backward(self, *input, *window, g),
            Op::Scan(rec) => super::scan::scan_backward(self, rec, g)?,
        };
        Ok(grads)
    }

    pub(crate) fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(dim_err!("axis {axis} out of rank {}", self.shape(a).len()));
        }
        Ok(())
    }
}

/// Visits every element of an `inner`-shaped block placed at `before` inside
/// an `outer`-shaped array, passing (inner flat index, outer flat index).
fn for_each_embedded(inner: &[usize], outer: &[usize], before: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = inner.len();
    let n: usize = inner.iter().product();
    let ostrides = crate::tensor::value::row_major_strides(outer);
    let mut idx = vec![0usize; rank];
    for src in 0..n {
        let dst: usize = (0..rank).map(|a| (idx[a] + before[a]) * ostrides[a]).sum();
        f(src, dst);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < inner[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
