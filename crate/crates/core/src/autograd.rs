//! Reverse-mode automatic differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are borrowed from their
//! owning store, so constructing a graph never copies model weights. Which parameters
//! receive gradients is decided by the graph's [`GradMode`].

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{mm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Selects the parameters that require gradients in a graph.
#[derive(Clone, Debug, Default)]
pub enum GradMode {
    #[default]
    None,
    All,
    Only(BTreeSet<String>),
}

impl GradMode {
    fn wants(&self, name: &str) -> bool {
        match self {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::Only(set) => set.contains(name),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    /// Extra rows/cols appended to transposed-convolution outputs.
    pub out_pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad, out_pad: 0 }
    }
}

enum Op<T> {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Gelu(Var),
    Abs(Var),
    LogSigmoid(Var),
    Swap01(Var),
    Reshape(Var),
    ToTokens(Var),
    FromTokens(Var),
    Concat1(Vec<Var>),
    SliceLast { x: Var, start: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    MaxUnpool2 { x: Var, index: Vec<usize> },
    Mean(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    mode: GradMode,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(context: &str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::Shape {
        context: context.to_string(),
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}

fn conv_out(size: usize, k: usize, g: ConvGeom) -> Option<usize> {
    let padded = size + 2 * g.pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / g.stride + 1)
}

fn conv_t_out(size: usize, k: usize, g: ConvGeom) -> Option<usize> {
    ((size - 1) * g.stride + k + g.out_pad).checked_sub(2 * g.pad)
}

/// Unfolds one image `[c, h, w]` into columns `[c*kh*kw, ho*wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|d| *d = T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + v) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + v) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] = x[base + ix as usize] + cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, g: ConvGeom) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(mode: GradMode) -> Self {
        Self { nodes: Vec::new(), mode }
    }

    pub fn inference() -> Self {
        Self::new(GradMode::None)
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn input_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A leaf that always receives a gradient (used for input-sensitivity checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, name: &str, t: &'a Tensor<T>) -> Var {
        let rg = self.mode.wants(name);
        self.push(Cow::Borrowed(t), Op::Param(name.to_string()), rg)
    }

    fn binary(&mut self, a: Var, b: Var, context: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(context, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, s), rg)
    }

    /// Adds `v: [B, C]` to every spatial position of `x: [B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.shape().len() != 4 || tv.shape() != &tx.shape()[..2] {
            return Err(shape_err("channel broadcast add", &tx.shape()[..2.min(tx.shape().len())], tv.shape()));
        }
        let hw = tx.shape()[2] * tx.shape()[3];
        let mut out = tx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let add = tv.data()[i];
            chunk.iter_mut().for_each(|d| *d = *d + add);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(Cow::Owned(out), Op::AddChannel(x, v), rg))
    }

    /// 2-D convolution. `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d input channels", ws, xs));
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out(h, kh, geom).ok_or_else(|| shape_err("conv2d spatial", kh, h))?;
        let wo = conv_out(wd, kw, geom).ok_or_else(|| shape_err("conv2d spatial", kw, wd))?;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d bias", [cout], self.value(b).shape()));
            }
        }
        let k = cin * kh * kw;
        let n = ho * wo;
        let mut out = vec![T::zero(); bsz * cout * n];
        let pointwise = is_pointwise(kh, kw, geom);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * n] };
        for bi in 0..bsz {
            let xb = &tx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, cin, h, wd, kh, kw, geom, ho, wo, &mut cols);
                &cols
            };
            mm::ab(cout, k, n, tw.data(), src, &mut out[bi * cout * n..(bi + 1) * cout * n], false);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(n).enumerate() {
                let bv = bias[i % cout];
                chunk.iter_mut().for_each(|d| *d = *d + bv);
            }
        }
        let t = Tensor::new(&[bsz, cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(Cow::Owned(t), Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed 2-D convolution. `w: [Cin, Cout, kh, kw]`, `b: [Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(shape_err("conv_transpose2d input channels", ws, xs));
        }
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = conv_t_out(h, kh, geom).ok_or_else(|| shape_err("conv_transpose2d spatial", kh, h))?;
        let wo = conv_t_out(wd, kw, geom).ok_or_else(|| shape_err("conv_transpose2d spatial", kw, wd))?;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv_transpose2d bias", [cout], self.value(b).shape()));
            }
        }
        let kk = cout * kh * kw;
        let n_in = h * wd;
        let n_out = ho * wo;
        let mut out = vec![T::zero(); bsz * cout * n_out];
        let mut cols = vec![T::zero(); kk * n_in];
        for bi in 0..bsz {
            let xb = &tx.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
            mm::atb(kk, cin, n_in, tw.data(), xb, &mut cols, false);
            col2im(&cols, cout, ho, wo, kh, kw, geom, h, wd, &mut out[bi * cout * n_out..(bi + 1) * cout * n_out]);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(n_out).enumerate() {
                let bv = bias[i % cout];
                chunk.iter_mut().for_each(|d| *d = *d + bv);
            }
        }
        let t = Tensor::new(&[bsz, cout, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(Cow::Owned(t), Op::ConvT { x, w, b, geom }, rg))
    }

    /// `y = x W^T + b` over the last axis of `x`. `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let ws = tw.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err("linear input features", ws, xs));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        let m = tx.len() / in_f;
        let mut out = vec![T::zero(); m * out_f];
        mm::abt(m, in_f, out_f, tx.data(), tw.data(), &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [out_f] {
                return Err(shape_err("linear bias", [out_f], bias.shape()));
            }
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bias.data()).for_each(|(d, &bv)| *d = *d + bv);
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out_f;
        let t = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(Cow::Owned(t), Op::Linear { x, w, b }, rg))
    }

    /// Batched matmul: `a: [B, M, K]`, `b: [B, K, N]` (or `[B, N, K]` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm batch", sa, sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm inner", k, kb));
        }
        let mut out = vec![T::zero(); bsz * m * n];
        for bi in 0..bsz {
            let ab = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &tb.data()[bi * k * n..(bi + 1) * k * n];
            let cb = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm::abt(m, k, n, ab, bb, cb, false);
            } else {
                mm::ab(m, k, n, ab, bb, cb, false);
            }
        }
        let t = Tensor::new(&[bsz, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(t), Op::Bmm { a, b, trans_b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&1);
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::Softmax(x), rg)
    }

    fn normalize_rows(data: &[T], row: usize, eps: f64) -> (Vec<T>, Vec<T>) {
        let eps = T::from_f64_lossy(eps);
        let nf = T::from_usize(row).unwrap();
        let mut xhat = vec![T::zero(); data.len()];
        let mut inv = Vec::with_capacity(data.len() / row);
        for (src, dst) in data.chunks(row).zip(xhat.chunks_mut(row)) {
            let mean = src.iter().cloned().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv.push(is);
        }
        (xhat, inv)
    }

    /// Instance normalization over the spatial axes of `[B, C, H, W]` with affine `[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || self.value(gamma).shape() != [s[1]] || self.value(beta).shape() != [s[1]] {
            return Err(shape_err("instance_norm", s, self.value(gamma).shape()));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let (xhat, inv_std) = Self::normalize_rows(tx.data(), hw, eps);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let (gv, bv) = (g[i % c], bt[i % c]);
            chunk.iter_mut().for_each(|d| *d = *d * gv + bv);
        }
        let t = Tensor::new(s, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Cow::Owned(t), Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Layer normalization over the last axis with affine `[C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&0);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("layer_norm", [c], self.value(gamma).shape()));
        }
        let (xhat, inv_std) = Self::normalize_rows(tx.data(), c, eps);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((d, &gv), &bv) in row.iter_mut().zip(g).zip(bt) {
                *d = *d * gv + bv;
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Cow::Owned(t), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `log(sigmoid(x))`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.min(T::zero()) - (-v.abs()).exp().ln_1p(), Op::LogSigmoid(x))
    }

    pub fn swap01(&mut self, x: Var) -> Var {
        let out = self.value(x).swap01();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), Op::Swap01(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), Op::Reshape(x), rg))
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(shape_err("to_tokens", "[B,C,H,W]", s));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![T::zero(); tx.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = tx.data()[(bi * c + ci) * hw + p];
                }
            }
        }
        let t = Tensor::new(&[b, hw, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(t), Op::ToTokens(x), rg))
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 3 || s[1] != h * w {
            return Err(shape_err("from_tokens", [h * w], s));
        }
        let (b, hw, c) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); tx.len()];
        for bi in 0..b {
            for p in 0..hw {
                for ci in 0..c {
                    out[(bi * c + ci) * hw + p] = tx.data()[(bi * hw + p) * c + ci];
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(t), Op::FromTokens(x), rg))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat1", &first, s));
            }
            axis += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let b = first[0];
        let mut out = Vec::with_capacity(b * axis * inner);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[bi * len..(bi + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[1] = axis;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(Cow::Owned(t), Op::Concat1(parts.to_vec()), rg))
    }

    /// Takes `len` entries starting at `start` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if start + len > d {
            return Err(shape_err("slice_last", d, start + len));
        }
        let mut out = Vec::with_capacity(tx.len() / d * len);
        for row in tx.data().chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(t), Op::SliceLast { x, start }, rg))
    }

    /// 2x2 max pooling with stride 2. Returns the pooled var; pass it to
    /// [`Graph::max_unpool2`] to scatter values back.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(shape_err("max_pool2", "[B,C,even,even]", s));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(bc * ho * wo);
        let mut argmax = Vec::with_capacity(bc * ho * wo);
        for p in 0..bc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = p * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if tx.data()[idx] > tx.data()[best] {
                            best = idx;
                        }
                    }
                    out.push(tx.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(t), Op::MaxPool2 { x, argmax }, rg))
    }

    /// Inverse of [`Graph::max_pool2`]: places `x` at the recorded argmax positions,
    /// zeros elsewhere.
    pub fn max_unpool2(&mut self, x: Var, pooled: Var) -> Result<Var> {
        let (index, src_shape) = match &self.nodes[pooled.0].op {
            Op::MaxPool2 { argmax, x: src } => (argmax.clone(), self.shape(*src).to_vec()),
            _ => return Err(Error::Config("max_unpool2 requires a max_pool2 result".into())),
        };
        let tx = self.value(x);
        if tx.len() != index.len() {
            return Err(shape_err("max_unpool2", index.len(), tx.len()));
        }
        let mut out = Tensor::zeros(&src_shape);
        for (&i, &v) in index.iter().zip(tx.data()) {
            out.data_mut()[i] = v;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), Op::MaxUnpool2 { x, index }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = T::from_usize(tx.len().max(1)).unwrap();
        let s = tx.data().iter().cloned().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "scalar loss", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut by_param: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads[i]) {
                match by_param.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        by_param.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Ok(Gradients { by_node: grads, by_param })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = zip_map(gy, self.value(*b), |g, v| g * v);
                    self.accum(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = zip_map(gy, self.value(*a), |g, v| g * v);
                    self.accum(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, gy.map(|v| v * s));
            }
            Op::AddChannel(x, v) => {
                self.accum(grads, *x, gy.clone());
                if self.needs(*v) {
                    let s = gy.shape();
                    let hw = s[2] * s[3];
                    let data = gy.data().chunks(hw).map(|c| c.iter().cloned().sum()).collect();
                    self.accum(grads, *v, Tensor::new(&s[..2], data).unwrap());
                }
            }
            Op::Conv { x, w, b, geom } => self.conv_backward(*x, *w, *b, *geom, gy, grads),
            Op::ConvT { x, w, b, geom } => self.conv_t_backward(*x, *w, *b, *geom, gy, grads),
            Op::Linear { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (out_f, in_f) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.len() / in_f;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); m * in_f];
                    mm::ab(m, out_f, in_f, gy.data(), tw.data(), &mut dx, false);
                    self.accum(grads, *x, Tensor::new(tx.shape(), dx).unwrap());
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out_f * in_f];
                    mm::atb(out_f, m, in_f, gy.data(), tx.data(), &mut dw, false);
                    self.accum(grads, *w, Tensor::new(tw.shape(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); out_f];
                    for row in gy.data().chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                    }
                    self.accum(grads, b, Tensor::new(&[out_f], db).unwrap());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = y.shape()[2];
                let mut da = vec![T::zero(); ta.len()];
                let mut db = vec![T::zero(); tb.len()];
                for bi in 0..bsz {
                    let g = &gy.data()[bi * m * n..(bi + 1) * m * n];
                    let av = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let bv = &tb.data()[bi * k * n..(bi + 1) * k * n];
                    let da_b = &mut da[bi * m * k..(bi + 1) * m * k];
                    let db_b = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        mm::ab(m, n, k, g, bv, da_b, false);
                        mm::atb(n, m, k, g, av, db_b, false);
                    } else {
                        mm::abt(m, n, k, g, bv, da_b, false);
                        mm::atb(k, m, n, av, g, db_b, false);
                    }
                }
                self.accum(grads, *a, Tensor::new(ta.shape(), da).unwrap());
                self.accum(grads, *b, Tensor::new(tb.shape(), db).unwrap());
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.data().chunks(d).zip(gy.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), dx).unwrap());
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let s = y.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                self.norm_backward(*x, *gamma, *beta, xhat, inv_std, hw, gy, grads, |row| row % c);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = *y.shape().last().unwrap();
                self.norm_backward_rows(*x, *gamma, *beta, xhat, inv_std, c, gy, grads);
            }
            Op::Relu(x) => {
                let g = zip_map(gy, self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() });
                self.accum(grads, *x, g);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let g = zip_map(gy, self.value(*x), |g, v| if v > T::zero() { g } else { g * s });
                self.accum(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = zip_map(gy, y, |g, t| g * (T::one() - t * t));
                self.accum(grads, *x, g);
            }
            Op::Gelu(x) => {
                let g = zip_map(gy, self.value(*x), |g, v| g * gelu_parts(v).1);
                self.accum(grads, *x, g);
            }
            Op::Abs(x) => {
                let g = zip_map(gy, self.value(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.accum(grads, *x, g);
            }
            Op::LogSigmoid(x) => {
                let g = zip_map(gy, self.value(*x), |g, v| g * sigmoid(-v));
                self.accum(grads, *x, g);
            }
            Op::Swap01(x) => self.accum(grads, *x, gy.swap01()),
            Op::Reshape(x) => {
                let g = gy.clone().reshape(self.shape(*x)).unwrap();
                self.accum(grads, *x, g);
            }
            Op::ToTokens(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![T::zero(); gy.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        for ci in 0..c {
                            dx[(bi * c + ci) * hw + p] = gy.data()[(bi * hw + p) * c + ci];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(&s, dx).unwrap());
            }
            Op::FromTokens(x) => {
                let s = self.shape(*x).to_vec();
                let (b, hw, c) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); gy.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            dx[(bi * hw + p) * c + ci] = gy.data()[(bi * c + ci) * hw + p];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(&s, dx).unwrap());
            }
            Op::Concat1(parts) => {
                let s = y.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[1] * inner;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(ps.iter().product());
                        for bi in 0..s[0] {
                            let start = bi * total + offset;
                            d.extend_from_slice(&gy.data()[start..start + len]);
                        }
                        self.accum(grads, p, Tensor::new(&ps, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::SliceLast { x, start } => {
                let xs = self.shape(*x).to_vec();
                let d = *xs.last().unwrap();
                let len = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(&xs);
                for (dr, gr) in dx.data_mut().chunks_mut(d).zip(gy.data().chunks(len)) {
                    dr[*start..*start + len].copy_from_slice(gr);
                }
                self.accum(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&i, &g) in argmax.iter().zip(gy.data()) {
                    dx.data_mut()[i] = dx.data()[i] + g;
                }
                self.accum(grads, *x, dx);
            }
            Op::MaxUnpool2 { x, index } => {
                let data = index.iter().map(|&i| gy.data()[i]).collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x), data).unwrap());
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let scale = gy.data()[0] / T::from_usize(tx.len().max(1)).unwrap();
                self.accum(grads, *x, Tensor::full(tx.shape(), scale));
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
        let k = cin * kh * kw;
        let n = ho * wo;
        let pointwise = is_pointwise(kh, kw, geom);
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dx = if need_x { vec![T::zero(); tx.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); tw.len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); k * n];
        for bi in 0..bsz {
            let g = &gy.data()[bi * cout * n..(bi + 1) * cout * n];
            let xb = &tx.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if need_w {
                let src: &[T] = if pointwise {
                    xb
                } else {
                    im2col(xb, cin, h, wd, kh, kw, geom, ho, wo, &mut cols);
                    &cols
                };
                mm::abt(cout, n, k, g, src, &mut dw, true);
            }
            if need_x {
                let dxb = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if pointwise {
                    mm::atb(k, cout, n, tw.data(), g, dxb, true);
                } else {
                    mm::atb(k, cout, n, tw.data(), g, &mut cols, false);
                    col2im(&cols, cin, h, wd, kh, kw, geom, ho, wo, dxb);
                }
            }
        }
        if need_x {
            self.accum(grads, x, Tensor::new(xs, dx).unwrap());
        }
        if need_w {
            self.accum(grads, w, Tensor::new(tw.shape(), dw).unwrap());
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            self.accum(grads, b, channel_sums(gy));
        }
    }

    fn conv_t_backward(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        let (ho, wo) = (gy.shape()[2], gy.shape()[3]);
        let kk = cout * kh * kw;
        let n_in = h * wd;
        let n_out = ho * wo;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dx = if need_x { vec![T::zero(); tx.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); tw.len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); kk * n_in];
        if need_x || need_w {
            for bi in 0..bsz {
                let g = &gy.data()[bi * cout * n_out..(bi + 1) * cout * n_out];
                im2col(g, cout, ho, wo, kh, kw, geom, h, wd, &mut cols);
                if need_x {
                    mm::ab(cin, kk, n_in, tw.data(), &cols, &mut dx[bi * cin * n_in..(bi + 1) * cin * n_in], false);
                }
                if need_w {
                    let xb = &tx.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
                    mm::abt(cin, n_in, kk, xb, &cols, &mut dw, true);
                }
            }
        }
        if need_x {
            self.accum(grads, x, Tensor::new(xs, dx).unwrap());
        }
        if need_w {
            self.accum(grads, w, Tensor::new(tw.shape(), dw).unwrap());
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            self.accum(grads, b, channel_sums(gy));
        }
    }

    /// Shared normalization backward. Rows of length `row` are normalized; `channel_of`
    /// maps a row index to its affine parameter index.
    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        row: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        channel_of: impl Fn(usize) -> usize,
    ) {
        let g = self.value(gamma).data();
        let c = g.len();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); xhat.len()];
        let nf = T::from_usize(row).unwrap();
        for (r, ((xr, gr), dr)) in xhat.chunks(row).zip(gy.data().chunks(row)).zip(dx.chunks_mut(row)).enumerate() {
            let ch = channel_of(r);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&xv, &gv) in xr.iter().zip(gr) {
                sum_g = sum_g + gv;
                sum_gx = sum_gx + gv * xv;
            }
            dgamma[ch] = dgamma[ch] + sum_gx;
            dbeta[ch] = dbeta[ch] + sum_g;
            let scale = g[ch] * inv_std[r] / nf;
            for ((o, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                *o = scale * (nf * gv - sum_g - xv * sum_gx);
            }
        }
        self.accum(grads, x, Tensor::new(self.shape(x), dx).unwrap());
        self.accum(grads, gamma, Tensor::new(&[c], dgamma).unwrap());
        self.accum(grads, beta, Tensor::new(&[c], dbeta).unwrap());
    }

    /// Layer-norm backward: the affine index varies along the row.
    #[allow(clippy::too_many_arguments)]
    fn norm_backward_rows(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        c: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let g = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); xhat.len()];
        let nf = T::from_usize(c).unwrap();
        for (r, ((xr, gr), dr)) in xhat.chunks(c).zip(gy.data().chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for j in 0..c {
                dgamma[j] = dgamma[j] + gr[j] * xr[j];
                dbeta[j] = dbeta[j] + gr[j];
                let d = gr[j] * g[j];
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * xr[j];
            }
            let scale = inv_std[r] / nf;
            for j in 0..c {
                dr[j] = scale * (nf * gr[j] * g[j] - sum_d - xr[j] * sum_dx);
            }
        }
        self.accum(grads, x, Tensor::new(self.shape(x), dx).unwrap());
        self.accum(grads, gamma, Tensor::new(&[c], dgamma).unwrap());
        self.accum(grads, beta, Tensor::new(&[c], dbeta).unwrap());
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn channel_sums<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let s = gy.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut db = vec![T::zero(); c];
    for (i, chunk) in gy.data().chunks(hw).enumerate() {
        db[i % c] = db[i % c] + chunk.iter().cloned().sum();
    }
    Tensor::new(&[c], db).unwrap()
}
