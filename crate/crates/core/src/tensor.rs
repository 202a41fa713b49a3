//! Dense row-major `f64` tensors and the forward/backward kernels used on the
//! training path.
//!
//! Spatial tensors are channels-last: `[h, w, c]` for a single map or
//! `[n, h, w, c]` for a batch of frames. Convolution kernels are laid out as
//! `[kh, kw, cin, cout]` and applied as cross-correlation (no flip).

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Position-weighted fingerprint used by golden tests: `(sum, Σ x_i·(1 + i mod 7))`.
    pub fn checksum(&self) -> (f64, f64) {
        let weighted = self
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * (1 + i % 7) as f64)
            .sum();
        (self.sum(), weighted)
    }

    /// Views a rank-3 `[h,w,c]` or rank-4 `[n,h,w,c]` tensor as `(n,h,w,c)`.
    pub fn nhwc(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((1, h, w, c)),
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => dim_err(format!("expected [h,w,c] or [n,h,w,c], got {:?}", self.shape)),
        }
    }
}

fn spatial_shape(like: &Tensor, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if like.rank() == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

// ---------------------------------------------------------------------------
// matmul

fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => dim_err(format!("{what} must be a matrix, got {:?}", t.shape)),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_matrix(a, "lhs")?;
    let (k2, n) = check_matrix(b, "rhs")?;
    if k != k2 {
        return dim_err(format!("matmul inner extents {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of `a·b` given the output gradient: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &grad.data[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data[p * n..(p + 1) * n];
            ga[i * k + p] = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
            let av = a.data[i * k + p];
            if av != 0.0 {
                for (o, g) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * g;
                }
            }
        }
    }
    (
        Tensor {
            shape: vec![m, k],
            data: ga,
        },
        Tensor {
            shape: vec![k, n],
            data: gb,
        },
    )
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = check_matrix(a, "transpose input")?;
    Ok(Tensor::from_fn(&[c, r], |i| a.data[(i % r) * c + i / r]))
}

/// Batched matmul `a[b×m×k] · w[b×k×n]`.
pub fn bmm(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (bt, m, k) = match a.shape[..] {
        [b, m, k] => (b, m, k),
        _ => return dim_err(format!("bmm lhs must be rank 3, got {:?}", a.shape)),
    };
    let (bt2, k2, n) = match w.shape[..] {
        [b, k, n] => (b, k, n),
        _ => return dim_err(format!("bmm rhs must be rank 3, got {:?}", w.shape)),
    };
    if bt != bt2 || k != k2 {
        return dim_err(format!("bmm shapes {:?} vs {:?}", a.shape, w.shape));
    }
    let mut out = vec![0.0; bt * m * n];
    for b in 0..bt {
        let wb = &w.data[b * k * n..(b + 1) * k * n];
        for i in 0..m {
            let arow = &a.data[(b * m + i) * k..(b * m + i + 1) * k];
            let orow = &mut out[(b * m + i) * n..(b * m + i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                for (o, wv) in orow.iter_mut().zip(&wb[p * n..(p + 1) * n]) {
                    *o += av * wv;
                }
            }
        }
    }
    Tensor::new(vec![bt, m, n], out)
}

pub fn bmm_backward(a: &Tensor, w: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (bt, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = w.shape[2];
    let mut ga = vec![0.0; bt * m * k];
    let mut gw = vec![0.0; bt * k * n];
    for b in 0..bt {
        for i in 0..m {
            let grow = &grad.data[(b * m + i) * n..(b * m + i + 1) * n];
            for p in 0..k {
                let off = (b * k + p) * n;
                let wrow = &w.data[off..off + n];
                ga[(b * m + i) * k + p] = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
                let av = a.data[(b * m + i) * k + p];
                for (o, g) in gw[off..off + n].iter_mut().zip(grow) {
                    *o += av * g;
                }
            }
        }
    }
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: w.shape.clone(),
            data: gw,
        },
    )
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1`.
    Valid,
    /// Zero padding, output extent `ceil(in / stride)`.
    Same,
    /// Like `Same`, but out-of-range taps read the nearest edge value, so a
    /// constant input maps to a constant output.
    Replicate,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_top: isize,
    pad_left: isize,
    padding: Padding,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let (n, h, w, cin) = input.nhwc()?;
        let (kh, kw, kcin, cout) = match kernel.shape[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return dim_err(format!("kernel must be [kh,kw,cin,cout], got {:?}", kernel.shape)),
        };
        if kcin != cin {
            return dim_err(format!("kernel expects {kcin} input channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return dim_err(format!("kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return dim_err("stride must be positive");
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return dim_err(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same | Padding::Replicate => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, (pad_h / 2) as isize, (pad_w / 2) as isize)
            }
        };
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride,
            pad_top,
            pad_left,
            padding,
        })
    }

    /// Input row/column read by output position `o` and kernel tap `k`.
    #[inline]
    fn tap(&self, o: usize, k: usize, pad: isize, extent: usize) -> Option<usize> {
        let i = (o * self.stride) as isize + k as isize - pad;
        if i >= 0 && (i as usize) < extent {
            Some(i as usize)
        } else if self.padding == Padding::Replicate {
            Some(i.clamp(0, extent as isize - 1) as usize)
        } else {
            None
        }
    }
}

/// 2-D cross-correlation over `[h,w,cin]` or `[n,h,w,cin]` inputs.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let mut out = vec![0.0; g.n * g.oh * g.ow * g.cout];
    let (cin, cout) = (g.cin, g.cout);
    for b in 0..g.n {
        let ib = b * g.h * g.w * cin;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((b * g.oh + oy) * g.ow + ox) * cout;
                let orow = &mut out[obase..obase + cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.tap(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.tap(ox, kx, g.pad_left, g.w) else { continue };
                        let ibase = ib + (iy * g.w + ix) * cin;
                        let kbase = (ky * g.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = input.data[ibase + ci];
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &kernel.data[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, k) in orow.iter_mut().zip(krow) {
                                *o += v * k;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: spatial_shape(input, g.n, g.oh, g.ow, cout),
        data: out,
    })
}

/// Gradients of [`conv2d`] w.r.t. input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let (cin, cout) = (g.cin, g.cout);
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for b in 0..g.n {
        let ib = b * g.h * g.w * cin;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((b * g.oh + oy) * g.ow + ox) * cout;
                let grow = &grad.data[obase..obase + cout];
                if grow.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.tap(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.tap(ox, kx, g.pad_left, g.w) else { continue };
                        let ibase = ib + (iy * g.w + ix) * cin;
                        let kbase = (ky * g.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let koff = kbase + ci * cout;
                            let krow = &kernel.data[koff..koff + cout];
                            gin[ibase + ci] += grow.iter().zip(krow).map(|(g, k)| g * k).sum::<f64>();
                            let v = input.data[ibase + ci];
                            if v != 0.0 {
                                for (o, gv) in gk[koff..koff + cout].iter_mut().zip(grow) {
                                    *o += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor {
            shape: input.shape.clone(),
            data: gin,
        },
        Tensor {
            shape: kernel.shape.clone(),
            data: gk,
        },
    ))
}

// ---------------------------------------------------------------------------
// activations

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return dim_err(format!("softmax axis {axis} out of range for {:?}", x.shape));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (x.data[idx(j)] - m).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[idx(j)] /= z;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

// ---------------------------------------------------------------------------
// pooling and resampling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    GlobalAvg,
    GlobalMax,
    ChannelAvg,
    ChannelMax,
}

/// Global pools reduce `(h,w)` to a `c`-vector (`[n,c]` when batched);
/// channel pools reduce `c` to an `h×w` map (`[.., h, w, 1]`).
pub fn pool(input: &Tensor, kind: PoolKind) -> Result<Tensor> {
    let (n, h, w, c) = input.nhwc()?;
    let d = &input.data;
    match kind {
        PoolKind::GlobalAvg | PoolKind::GlobalMax => {
            let avg = kind == PoolKind::GlobalAvg;
            let mut out = vec![if avg { 0.0 } else { f64::NEG_INFINITY }; n * c];
            for b in 0..n {
                for p in 0..h * w {
                    let base = (b * h * w + p) * c;
                    for ch in 0..c {
                        let v = d[base + ch];
                        let o = &mut out[b * c + ch];
                        if avg {
                            *o += v;
                        } else if v > *o {
                            *o = v;
                        }
                    }
                }
            }
            if avg {
                let k = 1.0 / (h * w) as f64;
                out.iter_mut().for_each(|v| *v *= k);
            }
            let shape = if input.rank() == 3 { vec![c] } else { vec![n, c] };
            Tensor::new(shape, out)
        }
        PoolKind::ChannelAvg | PoolKind::ChannelMax => {
            let out = d
                .chunks(c)
                .map(|px| {
                    if kind == PoolKind::ChannelAvg {
                        px.iter().sum::<f64>() / c as f64
                    } else {
                        px.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                })
                .collect();
            Tensor::new(spatial_shape(input, n, h, w, 1), out)
        }
    }
}

/// Nearest-neighbour upsampling by integer factors to `(target_h, target_w)`.
pub fn upsample_nearest(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (n, h, w, c) = input.nhwc()?;
    let (th, tw) = target;
    if th < h || tw < w || th % h != 0 || tw % w != 0 {
        return dim_err(format!("cannot upsample {h}x{w} to {th}x{tw} by integer factors"));
    }
    let (sy, sx) = (th / h, tw / w);
    let mut out = vec![0.0; n * th * tw * c];
    for b in 0..n {
        for y in 0..th {
            for x in 0..tw {
                let src = ((b * h + y / sy) * w + x / sx) * c;
                let dst = ((b * th + y) * tw + x) * c;
                out[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
            }
        }
    }
    Tensor::new(spatial_shape(input, n, th, tw, c), out)
}

pub fn upsample_nearest_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (n, h, w, c) = probe.nhwc()?;
    let (_, th, tw, _) = grad.nhwc()?;
    let (sy, sx) = (th / h, tw / w);
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..th {
            for x in 0..tw {
                let src = ((b * th + y) * tw + x) * c;
                let dst = ((b * h + y / sy) * w + x / sx) * c;
                for ch in 0..c {
                    out[dst + ch] += grad.data[src + ch];
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Non-overlapping `factor×factor` average pooling.
pub fn avg_pool2d(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, h, w, c) = input.nhwc()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return dim_err(format!("avg_pool2d factor {factor} does not divide {h}x{w}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let k = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let src = ((b * h + y) * w + x) * c;
                let dst = ((b * oh + y / factor) * ow + x / factor) * c;
                for ch in 0..c {
                    out[dst + ch] += input.data[src + ch] * k;
                }
            }
        }
    }
    Tensor::new(spatial_shape(input, n, oh, ow, c), out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], factor: usize, grad: &Tensor) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (n, h, w, c) = probe.nhwc()?;
    let (oh, ow) = (h / factor, w / factor);
    let k = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst = ((b * h + y) * w + x) * c;
                let src = ((b * oh + y / factor) * ow + x / factor) * c;
                for ch in 0..c {
                    out[dst + ch] = grad.data[src + ch] * k;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
