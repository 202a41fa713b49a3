//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output w.r.t. every recorded node. Binary arithmetic broadcasts
//! between tensors of equal rank whose extents are equal or 1.

use std::collections::{BTreeMap, HashMap};

use crate::error::{dim_err, Result};
use crate::tensor::{self, Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    SqrtFloor(Var, f64),
    Clamp(Var, f64, f64),
    MaxScalar(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    Softmax(Var, usize),
    Sum(Var),
    Max(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample(Var),
    AvgPool(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return dim_err(format!("rank mismatch {a:?} vs {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn bstrides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out`, yielding `(out_index, a_offset, b_offset)`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let last = out[rank - 1];
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    for o in 0..outer {
        let mut oa = 0;
        let mut ob = 0;
        for (d, &i) in idx.iter().enumerate() {
            oa += i * sa[d];
            ob += i * sb[d];
        }
        let base = o * last;
        for j in 0..last {
            f(base + j, oa + j * la, ob + j * lb);
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = bstrides(a.shape(), &out);
    let sb = bstrides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Sums `t` down to `shape` along broadcast axes.
fn sum_to(t: Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t;
    }
    let out = t.shape().to_vec();
    let s = bstrides(shape, &out);
    let mut data = vec![0.0; shape.iter().product()];
    let td = t.data();
    for_each_broadcast(&out, &s, &s, |o, i, _| data[i] += td[o]);
    Tensor::new(shape.to_vec(), data).expect("sum_to shape")
}

/// [`sum_to`] with Neumaier compensation, for forward reductions.
fn sum_to_compensated(t: &Tensor, shape: &[usize]) -> Tensor {
    let out = t.shape().to_vec();
    let s = bstrides(shape, &out);
    let n: usize = shape.iter().product();
    let mut sum = vec![0.0f64; n];
    let mut comp = vec![0.0f64; n];
    let td = t.data();
    for_each_broadcast(&out, &s, &s, |o, i, _| {
        let x = td[o];
        let acc = sum[i];
        let t = acc + x;
        comp[i] += if acc.abs() >= x.abs() { (acc - t) + x } else { (x - t) + acc };
        sum[i] = t;
    });
    let data = sum.iter().zip(&comp).map(|(s, c)| s + c).collect();
    Tensor::new(shape.to_vec(), data).expect("sum_to shape")
}

/// Expands `t` (broadcastable) to `shape`.
fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let s = bstrides(t.shape(), shape);
    let mut data = vec![0.0; shape.iter().product()];
    let td = t.data();
    for_each_broadcast(shape, &s, &s, |o, i, _| data[o] = td[i]);
    Tensor::new(shape.to_vec(), data).expect("expand_to shape")
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

// ---------------------------------------------------------------------------

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node (input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Var {
        self.leaf(Tensor::full(shape, value))
    }

    /// A named parameter leaf; repeated calls with the same name share one node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::Offset(a))
    }

    /// `k - a`.
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.offset(n, k)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = tensor::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = tensor::tanh(self.value(a));
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = tensor::relu(self.value(a));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `max(sqrt(a), floor)`; the gradient is zero on the floored branch.
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt().max(floor));
        self.push(v, Op::SqrtFloor(a, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn max_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x.max(k));
        self.push(v, Op::MaxScalar(a, k))
    }

    // -- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::bmm(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Bmm(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let v = tensor::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// `x · w + b` for `x[n×k]`, `w[k×m]`, `b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let m = self.shape(b)[0];
        let b2 = self.reshape(b, &[1, m])?;
        self.add(y, b2)
    }

    /// Convolution followed by a per-channel bias.
    pub fn conv_bias(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let y = self.conv2d(x, k, stride, padding)?;
        let c = self.shape(b)[0];
        let shape = vec![1; self.shape(y).len() - 1].into_iter().chain([c]).collect::<Vec<_>>();
        let b2 = self.reshape(b, &shape)?;
        self.add(y, b2)
    }

    // -- reductions & shape ----------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = tensor::softmax(self.value(a), axis)?;
        Ok(self.push(v, Op::Softmax(a, axis)))
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if axes.iter().any(|&ax| ax >= x.rank()) {
            return dim_err(format!("sum axes {axes:?} out of range for {:?}", x.shape()));
        }
        let out = reduced_shape(x.shape(), axes);
        // compensated so that the loss is accurate to the last bit or two;
        // finite-difference checks depend on it
        let v = sum_to_compensated(x, &out);
        Ok(self.push(v, Op::Sum(a)))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let n: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum_axes(a, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Max over `axes` (keepdim). Ties route the gradient to the first maximum.
    pub fn max_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if axes.iter().any(|&ax| ax >= x.rank()) {
            return dim_err(format!("max axes {axes:?} out of range for {:?}", x.shape()));
        }
        let full = x.shape().to_vec();
        let out = reduced_shape(&full, axes);
        let s = bstrides(&out, &full);
        let mut best = vec![f64::NEG_INFINITY; out.iter().product()];
        let mut arg = vec![0usize; best.len()];
        let xd = x.data();
        for_each_broadcast(&full, &s, &s, |i, o, _| {
            if xd[i] > best[o] {
                best[o] = xd[i];
                arg[o] = i;
            }
        });
        let v = Tensor::new(out, best)?;
        Ok(self.push(v, Op::Max(a, arg)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Explicit broadcast to `shape` (implemented as `a + 0`).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let z = self.constant(shape, 0.0);
        self.add(a, z)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return dim_err(format!("concat shapes {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return dim_err(format!("slice {start}+{len} on axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let v = Tensor::new(out, data)?;
        Ok(self.push(v, Op::Slice { x: a, axis, start }))
    }

    pub fn upsample(&mut self, a: Var, target: (usize, usize)) -> Result<Var> {
        let v = tensor::upsample_nearest(self.value(a), target)?;
        Ok(self.push(v, Op::Upsample(a)))
    }

    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var> {
        let v = tensor::avg_pool2d(self.value(a), factor)?;
        Ok(self.push(v, Op::AvgPool(a, factor)))
    }

    /// Global average over the spatial axes of `[n,h,w,c]`, giving `[n,c]`.
    pub fn global_avg(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return dim_err(format!("global_avg expects [n,h,w,c], got {s:?}"));
        }
        let m = self.mean_axes(a, &[1, 2])?;
        self.reshape(m, &[s[0], s[3]])
    }

    pub fn global_max(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return dim_err(format!("global_max expects [n,h,w,c], got {s:?}"));
        }
        let m = self.max_axes(a, &[1, 2])?;
        self.reshape(m, &[s[0], s[3]])
    }

    // -- backward ---------------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return dim_err(format!("backward needs a scalar, got {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, sum_to(g.clone(), self.shape(*a)));
                    acc(&mut grads, *b, sum_to(g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, sum_to(g.clone(), self.shape(*a)));
                    acc(&mut grads, *b, sum_to(g.map(|x| -x), self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_zip(&g, vb, |g, b| g * b)?;
                    let gb = broadcast_zip(&g, va, |g, a| g * a)?;
                    acc(&mut grads, *a, sum_to(ga, va.shape()));
                    acc(&mut grads, *b, sum_to(gb, vb.shape()));
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    let ga = broadcast_zip(&g, vb, |g, b| g / b)?;
                    let gb = ga.zip_map(y, |t, y| -t * y)?;
                    acc(&mut grads, *a, sum_to(ga, self.shape(*a)));
                    acc(&mut grads, *b, sum_to(gb, vb.shape()));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|x| x * k)),
                Op::Offset(a) | Op::Reshape(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(&mut grads, *a, g.reshape(&s)?);
                }
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))?),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))?),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 })?);
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(y, |g, e| g * e)?),
                Op::Ln(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| g / x)?);
                }
                Op::Powf(a, p) => {
                    let x = self.value(*a);
                    let p = *p;
                    acc(&mut grads, *a, g.zip_map(x, |g, x| g * p * x.powf(p - 1.0))?);
                }
                Op::SqrtFloor(a, floor) => {
                    let x = self.value(*a);
                    let f = *floor;
                    let gx = g
                        .zip_map(x, |g, x| {
                            let r = x.max(0.0).sqrt();
                            if r > f {
                                g / (2.0 * r)
                            } else {
                                0.0
                            }
                        })?;
                    acc(&mut grads, *a, gx);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let (lo, hi) = (*lo, *hi);
                    acc(&mut grads, *a, g.zip_map(x, |g, x| if x >= lo && x <= hi { g } else { 0.0 })?);
                }
                Op::MaxScalar(a, k) => {
                    let x = self.value(*a);
                    let k = *k;
                    acc(&mut grads, *a, g.zip_map(x, |g, x| if x >= k { g } else { 0.0 })?);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = tensor::matmul_backward(self.value(*a), self.value(*b), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Bmm(a, b) => {
                    let (ga, gb) = tensor::bmm_backward(self.value(*a), self.value(*b), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, tensor::transpose(&g)?),
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (gi, gk) = tensor::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        *stride,
                        *padding,
                        &g,
                    )?;
                    acc(&mut grads, *input, gi);
                    acc(&mut grads, *kernel, gk);
                }
                Op::Softmax(a, axis) => {
                    let shape = y.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + k;
                            let dot: f64 = (0..len).map(|j| yd[idx(j)] * gd[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(shape.to_vec(), gx)?);
                }
                Op::Sum(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(&mut grads, *a, expand_to(&g, &s));
                }
                Op::Max(a, arg) => {
                    let s = self.shape(*a).to_vec();
                    let mut gx = Tensor::zeros(&s);
                    for (o, &src) in arg.iter().enumerate() {
                        gx.data_mut()[src] += g.data()[o];
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Concat(parts, axis) => {
                    let shape = y.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p).to_vec();
                        let len = ps[*axis] * inner;
                        let mut data = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * shape[*axis] * inner + offset;
                            data.extend_from_slice(&g.data()[base..base + len]);
                        }
                        offset += len;
                        acc(&mut grads, p, Tensor::new(ps, data)?);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xs = self.shape(*x).to_vec();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = y.shape()[*axis] * inner;
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&xs));
                    for o in 0..outer {
                        let base = (o * xs[*axis] + start) * inner;
                        let dst = &mut slot.data_mut()[base..base + len];
                        for (d, s) in dst.iter_mut().zip(&g.data()[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                }
                Op::Upsample(a) => {
                    let s = self.shape(*a).to_vec();
                    acc(&mut grads, *a, tensor::upsample_nearest_backward(&s, &g)?);
                }
                Op::AvgPool(a, f) => {
                    let s = self.shape(*a).to_vec();
                    acc(&mut grads, *a, tensor::avg_pool2d_backward(&s, *f, &g)?);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every registered parameter, zero-filled where unused.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_gradients_sum_over_broadcast_axes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.mul(a, b).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let top = g.slice(a, 0, 0, 1).unwrap();
        let rest = g.slice(a, 0, 1, 2).unwrap();
        let back = g.concat(&[rest, top], 0).unwrap();
        assert_eq!(g.value(back).data(), &[2.0, 3.0, 4.0, 5.0, 0.0, 1.0]);
        let w = g.leaf(Tensor::from_fn(&[3, 2], |i| (i + 1) as f64));
        let p = g.mul(back, w).unwrap();
        let s = g.sum_all(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn max_routes_to_first_maximum() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 4], vec![1.0, 5.0, 5.0, 2.0]).unwrap());
        let m = g.max_axes(a, &[1]).unwrap();
        let s = g.sum_all(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn param_names_are_shared() {
        let mut g = Graph::new();
        let t = Tensor::scalar(2.0);
        let a = g.param("w", &t);
        let b = g.param("w", &t);
        assert_eq!(a, b);
        assert_eq!(g.params().len(), 1);
    }
}
