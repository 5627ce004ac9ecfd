//! Tape-based reverse-mode differentiation over a small closed set of
//! tensor primitives.
//!
//! A [`Graph`] records every operation as a node holding its forward
//! value. [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every leaf that asked for one. Frozen parameters are
//! recorded as leaves without gradient, so no work is spent on them and
//! they never show up in the returned gradient set.

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::scalar::{gemm, View};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

enum Op<S> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
    },
    GatedAdd {
        x: Var,
        gate: Var,
        y: Var,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    BroadcastBatch(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    MeanAxis1(Var),
    Mse {
        pred: Var,
        target: Vec<S>,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let one = S::one();
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let th = tanh_via_exp(u);
    let val = half * x * (one + th);
    let du = c * (one + S::of(3.0) * a * x * x);
    let d = half * (one + th) + half * x * (one - th * th) * du;
    (val, d)
}

/// `tanh` through a single `exp`.
fn tanh_via_exp<S: Scalar>(u: S) -> S {
    let two = S::of(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient when `needs_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>, needs_grad: bool) -> Var {
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Loads a named parameter. Repeated loads of the same name share one
    /// node; frozen parameters become gradient-free leaves.
    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape("linear", format!("x {xs:?} vs weight {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs out {dout}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).rows();
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&out_shape);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.data_mut().chunks_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            din,
            dout,
            S::one(),
            self.value(x).data(),
            View::row_major(0, din),
            self.value(w).data(),
            View::row_major(0, dout),
            if b.is_some() { S::one() } else { S::zero() },
            out.data_mut(),
            View::row_major(0, dout),
        );
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x + p` where `p`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_suffix(&mut self, x: Var, p: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ps = self.shape(p);
        if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != *ps {
            return Err(Error::shape("add_suffix", format!("{xs:?} vs {ps:?}")));
        }
        let mut out = self.value(x).clone();
        let pv = self.value(p).data();
        let n = pv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(pv) {
                *o += v;
            }
        }
        let ng = self.ng(x) || self.ng(p);
        Ok(self.push(out, Op::AddSuffix(x, p), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// Normalizes over the last dimension with variance floor 1e-5, then
    /// applies the optional elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine {:?} vs last dim {d}", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![S::zero(); xv.numel()];
        let mut rstd = vec![S::zero(); rows];
        let inv_d = S::one() / S::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + S::of(1e-5)).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = Tensor::from_vec(xv.shape(), xhat.clone())?;
        if gain.is_some() || bias.is_some() {
            let g = gain.map(|g| self.value(g).data().to_vec());
            let b = bias.map(|b| self.value(b).data().to_vec());
            for row in out.data_mut().chunks_mut(d) {
                for (j, o) in row.iter_mut().enumerate() {
                    if let Some(g) = &g {
                        *o *= g[j];
                    }
                    if let Some(b) = &b {
                        *o += b[j];
                    }
                }
            }
        }
        let ng = self.ng(x) || [gain, bias].into_iter().flatten().any(|p| self.ng(p));
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    fn per_batch_check(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let cs = self.shape(c);
        if cs.len() != 2 || xs.len() < 2 || xs[0] != cs[0] || *xs.last().unwrap() != cs[1] {
            return Err(Error::shape(op, format!("x {xs:?} vs per-batch {cs:?}")));
        }
        let b = cs[0];
        let d = cs[1];
        let l = self.value(x).numel() / (b * d).max(1);
        Ok((b, l, d))
    }

    /// `x * (1 + scale) + shift` with per-batch-row `shift`, `scale` of shape `[B, d]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let (b, l, d) = self.per_batch_check("modulate", x, shift)?;
        self.same_shape("modulate", shift, scale)?;
        let mut out = self.value(x).clone();
        let sh = self.value(shift).data();
        let sc = self.value(scale).data();
        for bi in 0..b {
            for li in 0..l {
                let row = &mut out.data_mut()[(bi * l + li) * d..(bi * l + li + 1) * d];
                for j in 0..d {
                    row[j] = row[j] * (S::one() + sc[bi * d + j]) + sh[bi * d + j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        Ok(self.push(out, Op::Modulate { x, shift, scale }, ng))
    }

    /// `x + gate * y` with per-batch-row `gate` of shape `[B, d]`.
    pub fn gated_add(&mut self, x: Var, gate: Var, y: Var) -> Result<Var> {
        self.same_shape("gated_add", x, y)?;
        let (b, l, d) = self.per_batch_check("gated_add", x, gate)?;
        let mut out = self.value(x).clone();
        let g = self.value(gate).data();
        let yv = self.value(y).data();
        for bi in 0..b {
            for li in 0..l {
                let off = (bi * l + li) * d;
                for j in 0..d {
                    out.data_mut()[off + j] += g[bi * d + j] * yv[off + j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gate) || self.ng(y);
        Ok(self.push(out, Op::GatedAdd { x, gate, y }, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let d = out.last_dim();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                softmax_row(row);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Scaled dot-product attention split over `heads`, on already-projected
    /// `q: [B, Lq, d]`, `k, v: [B, Lk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::shape("attention", format!("q {qs:?} vs k {ks:?}")));
        }
        self.same_shape("attention", k, v)?;
        let (b, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if lk == 0 {
            return Err(Error::shape("attention", "empty key/value set"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut probs = vec![S::zero(); b * heads * lq * lk];
        let mut out = Tensor::zeros(&[b, lq, d]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for bi in 0..b {
            for h in 0..heads {
                let p_off = (bi * heads + h) * lq * lk;
                gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    qd,
                    View::row_major(bi * lq * d + h * dh, d),
                    kd,
                    View::row_major(bi * lk * d + h * dh, d).t(),
                    S::zero(),
                    &mut probs,
                    View::row_major(p_off, lk),
                );
                for row in probs[p_off..p_off + lq * lk].chunks_mut(lk) {
                    softmax_row(row);
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    S::one(),
                    &probs,
                    View::row_major(p_off, lk),
                    vd,
                    View::row_major(bi * lk * d + h * dh, d),
                    S::zero(),
                    out.data_mut(),
                    View::row_major(bi * lq * d + h * dh, d),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let len = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, alen, inner) = split_axis(&xs, axis);
        let mut shape = xs.clone();
        shape[axis] = len;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    /// Row lookup: `table[idx[i]]` for each index, giving `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather", format!("table {ts:?}")));
        }
        let d = ts[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= ts[0] {
                return Err(Error::shape("gather", format!("index {i} >= {}", ts[0])));
            }
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[idx.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Repeats `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![batch];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(batch * xv.numel());
        for _ in 0..batch {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_vec(&shape, data).expect("broadcast shape");
        let ng = self.ng(x);
        self.push(out, Op::BroadcastBatch(x), ng)
    }

    /// 2-D convolution on NHWC input with a square kernel, reflective
    /// padding of `kernel / 2`, weight laid out `[kernel² · in_ch, out_ch]`
    /// (kernel row, kernel column, input channel).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 2 || kernel == 0 || stride == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (batch, height, width, in_ch) = (xs[0], xs[1], xs[2], xs[3]);
        let pad = kernel / 2;
        if ws[0] != kernel * kernel * in_ch
            || self.shape(b) != [ws[1]]
            || height <= pad
            || width <= pad
        {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, b {:?}", self.shape(b)),
            ));
        }
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            height,
            width,
            in_ch,
            out_ch: ws[1],
            kernel,
            stride,
            out_h,
            out_w,
        };
        let kcols = kernel * kernel * in_ch;
        let nrows = batch * out_h * out_w;
        let xv = self.value(x).data();
        let mut cols = vec![S::zero(); nrows * kcols];
        for bi in 0..batch {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let r = (bi * out_h + oy) * out_w + ox;
                    for ky in 0..kernel {
                        let iy = reflect((oy * stride + ky) as isize - pad as isize, height);
                        for kx in 0..kernel {
                            let ix = reflect((ox * stride + kx) as isize - pad as isize, width);
                            let src = ((bi * height + iy) * width + ix) * in_ch;
                            let dst = r * kcols + (ky * kernel + kx) * in_ch;
                            cols[dst..dst + in_ch].copy_from_slice(&xv[src..src + in_ch]);
                        }
                    }
                }
            }
        }
        let out_ch = geom.out_ch;
        let mut out = Tensor::zeros(&[batch, out_h, out_w, out_ch]);
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(out_ch) {
            row.copy_from_slice(bv);
        }
        gemm(
            nrows,
            kcols,
            out_ch,
            S::one(),
            &cols,
            View::row_major(0, kcols),
            self.value(w).data(),
            View::row_major(0, out_ch),
            S::one(),
            out.data_mut(),
            View::row_major(0, out_ch),
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        ))
    }

    /// Mean over axis 1 of a `[B, L, d]` tensor.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(Error::shape("mean_axis1", format!("{xs:?}")));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let inv = S::one() / S::of(l as f64);
        let mut out = Tensor::zeros(&[b, d]);
        for bi in 0..b {
            let o = &mut out.data_mut()[bi * d..(bi + 1) * d];
            for li in 0..l {
                for (oj, &v) in o.iter_mut().zip(&xv[(bi * l + li) * d..(bi * l + li + 1) * d]) {
                    *oj += v;
                }
            }
            for oj in o.iter_mut() {
                *oj *= inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanAxis1(x), ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(pred), target.shape()),
            ));
        }
        let n = S::of(target.numel().max(1) as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<S>()
            / n;
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut leaves = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].needs_grad {
                    leaves.insert(Var(i), g);
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let din = xv.last_dim();
                let dout = wv.shape()[1];
                let rows = xv.rows();
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(
                        rows,
                        dout,
                        din,
                        S::one(),
                        gd,
                        View::row_major(0, dout),
                        wv.data(),
                        View::row_major(0, dout).t(),
                        S::zero(),
                        dx.data_mut(),
                        View::row_major(0, din),
                    );
                    accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(
                        din,
                        rows,
                        dout,
                        S::one(),
                        xv.data(),
                        View::row_major(0, din).t(),
                        gd,
                        View::row_major(0, dout),
                        S::zero(),
                        dw.data_mut(),
                        View::row_major(0, dout),
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(&[dout]);
                        for row in gd.chunks(dout) {
                            for (o, &v) in db.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::AddSuffix(x, p) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.ng(*p) {
                    let ps = self.shape(*p);
                    let mut dp = Tensor::zeros(ps);
                    let n = dp.numel();
                    for chunk in gd.chunks(n) {
                        for (o, &v) in dp.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *p, dp);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = zip_map(gd, bv.data(), |g, y| g * y);
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), d).unwrap());
                }
                if self.ng(*b) {
                    let d = zip_map(gd, av.data(), |g, x| g * x);
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), d).unwrap());
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = zip_map(gd, xv.data(), |g, x| g * gelu_parts(x).1);
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = zip_map(gd, xv.data(), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (S::one() - s))
                });
                accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                let gvals = gain.map(|gn| self.value(gn).data().to_vec());
                if let Some(gn) = gain {
                    if self.ng(*gn) {
                        let mut dg = Tensor::zeros(&[d]);
                        for (row_g, row_x) in gd.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg.data_mut()[j] += row_g[j] * row_x[j];
                            }
                        }
                        accumulate(grads, *gn, dg);
                    }
                }
                if let Some(bs) = bias {
                    if self.ng(*bs) {
                        let mut db = Tensor::zeros(&[d]);
                        for row_g in gd.chunks(d) {
                            for j in 0..d {
                                db.data_mut()[j] += row_g[j];
                            }
                        }
                        accumulate(grads, *bs, db);
                    }
                }
                if self.ng(*x) {
                    let inv_d = S::one() / S::of(d as f64);
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let mut dxh = vec![S::zero(); d];
                    for (r, (row_g, row_x)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let v = match &gvals {
                                Some(gv) => row_g[j] * gv[j],
                                None => row_g[j],
                            };
                            dxh[j] = v;
                            m1 += v;
                            m2 += v * row_x[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = rstd[r] * (dxh[j] - m1 - row_x[j] * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Modulate { x, shift, scale } => {
                let (b, l, d) = self.per_batch_check("modulate", *x, *shift).unwrap();
                let sc = self.value(*scale).data();
                let xv = self.value(*x).data();
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for bi in 0..b {
                        for li in 0..l {
                            let off = (bi * l + li) * d;
                            for j in 0..d {
                                dx.data_mut()[off + j] = gd[off + j] * (S::one() + sc[bi * d + j]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                let want_shift = self.ng(*shift);
                let want_scale = self.ng(*scale);
                if want_shift || want_scale {
                    let mut dsh = Tensor::zeros(&[b, d]);
                    let mut dsc = Tensor::zeros(&[b, d]);
                    for bi in 0..b {
                        for li in 0..l {
                            let off = (bi * l + li) * d;
                            for j in 0..d {
                                dsh.data_mut()[bi * d + j] += gd[off + j];
                                dsc.data_mut()[bi * d + j] += gd[off + j] * xv[off + j];
                            }
                        }
                    }
                    if want_shift {
                        accumulate(grads, *shift, dsh);
                    }
                    if want_scale {
                        accumulate(grads, *scale, dsc);
                    }
                }
            }
            Op::GatedAdd { x, gate, y } => {
                let (b, l, d) = self.per_batch_check("gated_add", *x, *gate).unwrap();
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                let gv = self.value(*gate).data();
                let yv = self.value(*y).data();
                if self.ng(*y) {
                    let mut dy = Tensor::zeros(self.shape(*y));
                    for bi in 0..b {
                        for li in 0..l {
                            let off = (bi * l + li) * d;
                            for j in 0..d {
                                dy.data_mut()[off + j] = gd[off + j] * gv[bi * d + j];
                            }
                        }
                    }
                    accumulate(grads, *y, dy);
                }
                if self.ng(*gate) {
                    let mut dg = Tensor::zeros(&[b, d]);
                    for bi in 0..b {
                        for li in 0..l {
                            let off = (bi * l + li) * d;
                            for j in 0..d {
                                dg.data_mut()[bi * d + j] += gd[off + j] * yv[off + j];
                            }
                        }
                    }
                    accumulate(grads, *gate, dg);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = Tensor::zeros(y.shape());
                for ((o, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(gd.chunks(d))
                {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(outer * plen * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            dp.extend_from_slice(&gd[base..base + plen * inner]);
                        }
                        accumulate(grads, p, Tensor::from_vec(self.shape(p), dp).unwrap());
                    }
                    start += plen;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, alen, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = Tensor::zeros(xs);
                for o in 0..outer {
                    let base = o * alen * inner + start * inner;
                    dx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { table, idx } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = Tensor::zeros(ts);
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut dt.data_mut()[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x)).unwrap();
                accumulate(grads, *x, dx);
            }
            Op::BroadcastBatch(x) => {
                let xs = self.shape(*x);
                let mut dx = Tensor::zeros(xs);
                let n = dx.numel();
                for chunk in gd.chunks(n) {
                    for (o, &v) in dx.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols, gd, grads),
            Op::MeanAxis1(x) => {
                let xs = self.shape(*x);
                let (b, l, d) = (xs[0], xs[1], xs[2]);
                let inv = S::one() / S::of(l as f64);
                let mut dx = Tensor::zeros(xs);
                for bi in 0..b {
                    for li in 0..l {
                        let off = (bi * l + li) * d;
                        for j in 0..d {
                            dx.data_mut()[off + j] = gd[bi * d + j] * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let c = gd[0] * S::of(2.0) / S::of(target.len().max(1) as f64);
                let d = zip_map(pv.data(), target, |p, t| c * (p - t));
                accumulate(grads, *pred, Tensor::from_vec(pv.shape(), d).unwrap());
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[S],
        gd: &[S],
        grads: &mut [Option<Tensor<S>>],
    ) {
        let qs = self.shape(q);
        let (b, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = self.shape(k)[1];
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = Tensor::zeros(qs);
        let mut dk = Tensor::zeros(self.shape(k));
        let mut dv = Tensor::zeros(self.shape(v));
        let mut ds = vec![S::zero(); lq * lk];
        let (wq, wk, wv) = (self.ng(q), self.ng(k), self.ng(v));
        for bi in 0..b {
            for h in 0..heads {
                let p_off = (bi * heads + h) * lq * lk;
                let q_view = View::row_major(bi * lq * d + h * dh, d);
                let kv_view = View::row_major(bi * lk * d + h * dh, d);
                if wv {
                    gemm(
                        lk,
                        lq,
                        dh,
                        S::one(),
                        probs,
                        View::row_major(p_off, lk).t(),
                        gd,
                        q_view,
                        S::zero(),
                        dv.data_mut(),
                        kv_view,
                    );
                }
                if !(wq || wk) {
                    continue;
                }
                gemm(
                    lq,
                    dh,
                    lk,
                    S::one(),
                    gd,
                    q_view,
                    vd,
                    kv_view.t(),
                    S::zero(),
                    &mut ds,
                    View::row_major(0, lk),
                );
                for (drow, prow) in ds.chunks_mut(lk).zip(probs[p_off..p_off + lq * lk].chunks(lk)) {
                    let dot: S = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for j in 0..lk {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                }
                if wq {
                    gemm(
                        lq,
                        lk,
                        dh,
                        scale,
                        &ds,
                        View::row_major(0, lk),
                        kd,
                        kv_view,
                        S::zero(),
                        dq.data_mut(),
                        q_view,
                    );
                }
                if wk {
                    gemm(
                        lk,
                        lq,
                        dh,
                        scale,
                        &ds,
                        View::row_major(0, lk).t(),
                        qd,
                        q_view,
                        S::zero(),
                        dk.data_mut(),
                        kv_view,
                    );
                }
            }
        }
        if wq {
            accumulate(grads, q, dq);
        }
        if wk {
            accumulate(grads, k, dk);
        }
        if wv {
            accumulate(grads, v, dv);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        cols: &[S],
        gd: &[S],
        grads: &mut [Option<Tensor<S>>],
    ) {
        let kcols = geom.kernel * geom.kernel * geom.in_ch;
        let nrows = geom.batch * geom.out_h * geom.out_w;
        let oc = geom.out_ch;
        if self.ng(w) {
            let mut dw = Tensor::zeros(self.shape(w));
            gemm(
                kcols,
                nrows,
                oc,
                S::one(),
                cols,
                View::row_major(0, kcols).t(),
                gd,
                View::row_major(0, oc),
                S::zero(),
                dw.data_mut(),
                View::row_major(0, oc),
            );
            accumulate(grads, w, dw);
        }
        if self.ng(b) {
            let mut db = Tensor::zeros(&[oc]);
            for row in gd.chunks(oc) {
                for (o, &v) in db.data_mut().iter_mut().zip(row) {
                    *o += v;
                }
            }
            accumulate(grads, b, db);
        }
        if self.ng(x) {
            let mut dcols = vec![S::zero(); nrows * kcols];
            gemm(
                nrows,
                oc,
                kcols,
                S::one(),
                gd,
                View::row_major(0, oc),
                self.value(w).data(),
                View::row_major(0, oc).t(),
                S::zero(),
                &mut dcols,
                View::row_major(0, kcols),
            );
            let mut dx = Tensor::zeros(self.shape(x));
            let pad = geom.pad();
            let c = geom.in_ch;
            for bi in 0..geom.batch {
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let r = (bi * geom.out_h + oy) * geom.out_w + ox;
                        for ky in 0..geom.kernel {
                            let iy = reflect(
                                (oy * geom.stride + ky) as isize - pad as isize,
                                geom.height,
                            );
                            for kx in 0..geom.kernel {
                                let ix = reflect(
                                    (ox * geom.stride + kx) as isize - pad as isize,
                                    geom.width,
                                );
                                let dst = ((bi * geom.height + iy) * geom.width + ix) * c;
                                let src = r * kcols + (ky * geom.kernel + kx) * c;
                                for j in 0..c {
                                    dx.data_mut()[dst + j] += dcols[src + j];
                                }
                            }
                        }
                    }
                }
            }
            accumulate(grads, x, dx);
        }
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients<S: Scalar> {
    leaves: BTreeMap<Var, Tensor<S>>,
    params: BTreeMap<String, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    /// Gradients keyed by parameter name, for trainable parameters the
    /// loss actually reached.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (name, v) in self.params {
            if let Some(g) = self.leaves.remove(&v) {
                out.insert(name, g);
            }
        }
        out
    }
}
