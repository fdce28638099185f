//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value. Nodes only
//! ever reference earlier nodes, so walking the tape backwards from an output
//! visits each record once in a valid reverse topological order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// NCHW input, OIHW kernel, optional bias of length O; stride 1.
    Conv2d {
        padding: usize,
    },
    /// Elementwise with right-aligned broadcasting.
    Add,
    Mul,
    Relu,
    Sigmoid,
    /// `[N, C, H, W] -> [N, 1, H, W]`
    ChannelMaxPool,
    ChannelAvgPool,
    /// `[N, ...] -> [N, prod(...)]`
    Flatten,
    UpsampleNearest {
        height: usize,
        width: usize,
    },
    Log,
    Sum,
    Mean,
    Affine {
        scale: f64,
        shift: f64,
    },
    Clamp {
        lo: f64,
        hi: f64,
    },
    ConcatChannels,
    /// 2x2 window, stride 2, floor semantics.
    MaxPool2,
    /// `[N, C, H, W] -> [N, C]`
    GlobalAvgPool,
    /// Row-wise over the last axis of a rank-2 tensor.
    LogSoftmax,
}

#[derive(Debug)]
enum Record {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelAvg(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Upsample(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    record: Record,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => shape_err(format!("{what} expects a rank-4 NCHW tensor, got {s:?}")),
    }
}

/// Output shape of broadcasting `a` against `b` (numpy rules).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For every element of `out`, the flat offset of the broadcast source in `input`.
fn broadcast_offsets(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + pad] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// `c (+)= op(a) * op(b)` with row-major operands; `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // Row-major a is m x k unless transposed, in which case storage is k x m.
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the dimensions and strides checked above.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Record::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, record: Record, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            record,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor, record: Record) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, record, rg)
    }

    /// Dispatches a primitive by kind.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                shape_err(format!("{prim:?} takes {n} inputs, got {}", inputs.len()))
            }
        };
        match prim {
            Primitive::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Conv2d { padding } => match inputs {
                [x, w] => self.conv2d(*x, *w, None, padding),
                [x, w, b] => self.conv2d(*x, *w, Some(*b), padding),
                _ => shape_err(format!("conv2d takes 2 or 3 inputs, got {}", inputs.len())),
            },
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            Primitive::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            Primitive::ChannelMaxPool => {
                arity(1)?;
                self.channel_max_pool(inputs[0])
            }
            Primitive::ChannelAvgPool => {
                arity(1)?;
                self.channel_avg_pool(inputs[0])
            }
            Primitive::Flatten => {
                arity(1)?;
                self.flatten(inputs[0])
            }
            Primitive::UpsampleNearest { height, width } => {
                arity(1)?;
                self.upsample_nearest(inputs[0], height, width)
            }
            Primitive::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            Primitive::Sum => {
                arity(1)?;
                Ok(self.sum(inputs[0]))
            }
            Primitive::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            Primitive::Affine { scale, shift } => {
                arity(1)?;
                Ok(self.affine(inputs[0], scale, shift))
            }
            Primitive::Clamp { lo, hi } => {
                arity(1)?;
                self.clamp(inputs[0], lo, hi)
            }
            Primitive::ConcatChannels => self.concat_channels(inputs),
            Primitive::MaxPool2 => {
                arity(1)?;
                self.max_pool2(inputs[0])
            }
            Primitive::GlobalAvgPool => {
                arity(1)?;
                self.global_avg_pool(inputs[0])
            }
            Primitive::LogSoftmax => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return shape_err(format!("matmul of {sa:?} and {sb:?}")),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Record::MatMul { a, b },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv2d input")?;
        let (o, c2, kh, kw) = dims4(self.value(w), "conv2d kernel")?;
        if c != c2 {
            return shape_err(format!(
                "conv2d input has {c} channels, kernel expects {c2}"
            ));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}"
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return shape_err(format!(
                    "conv2d bias must have shape [{o}], got {:?}",
                    self.value(b).shape()
                ));
            }
        }
        let (oh, ow) = (h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1);
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let mut out = vec![0.0; n * o * oh * ow];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for img in 0..n {
                for oc in 0..o {
                    let base = (img * o + oc) * oh * ow;
                    out[base..base + oh * ow].fill(bd[oc]);
                }
            }
        }
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        let mut plane = vec![0.0; ph * pw];
        for img in 0..n {
            for ic in 0..c {
                let src = &xd[(img * c + ic) * h * wd..(img * c + ic + 1) * h * wd];
                pad_plane(src, h, wd, padding, &mut plane);
                for oc in 0..o {
                    let obase = (img * o + oc) * oh * ow;
                    let kern = &wdata[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                    correlate(
                        &plane,
                        pw,
                        kern,
                        kh,
                        kw,
                        &mut out[obase..obase + oh * ow],
                        oh,
                        ow,
                    );
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, o, oh, ow], out),
            Record::Conv2d {
                x,
                w,
                bias,
                padding,
            },
            rg,
        ))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((Tensor::from_parts(av.shape().to_vec(), data), false));
        }
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let oa = broadcast_offsets(av.shape(), &shape);
        let ob = broadcast_offsets(bv.shape(), &shape);
        let (ad, bd) = (av.data(), bv.data());
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
        Ok((Tensor::from_parts(shape, data), true))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Record::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.elementwise(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Record::Mul { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.unary(x, value, Record::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.unary(x, value, Record::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "log of non-positive or non-finite value {bad}"
            )));
        }
        let value = xv.map(f64::ln);
        Ok(self.unary(x, value, Record::Log(x)))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.unary(x, value, Record::Affine { x, scale })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Domain(format!(
                "clamp bounds inverted: [{lo}, {hi}]"
            )));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.unary(x, value, Record::Clamp { x, lo, hi }))
    }

    pub fn channel_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "channel max pool")?;
        let xd = self.value(x).data();
        let plane = h * w;
        let mut out = vec![f64::NEG_INFINITY; n * plane];
        let mut argmax = vec![0usize; n * plane];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for p in 0..plane {
                    let v = xd[base + p];
                    if v > out[img * plane + p] {
                        out[img * plane + p] = v;
                        argmax[img * plane + p] = base + p;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, 1, h, w], out);
        Ok(self.unary(x, value, Record::ChannelMax { x, argmax }))
    }

    pub fn channel_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "channel avg pool")?;
        let xd = self.value(x).data();
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        for img in 0..n {
            let dst = &mut out[img * plane..(img + 1) * plane];
            for ch in 0..c {
                let base = (img * c + ch) * plane;
                for (d, v) in dst.iter_mut().zip(&xd[base..base + plane]) {
                    *d += v;
                }
            }
            let inv = 1.0 / c as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let value = Tensor::from_parts(vec![n, 1, h, w], out);
        Ok(self.unary(x, value, Record::ChannelAvg(x)))
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero tensors".into());
        };
        let s0 = self.value(first).shape().to_vec();
        if s0.len() < 2 {
            return shape_err(format!("concat needs rank >= 2, got {s0:?}"));
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut channels = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
                return shape_err(format!("concat of {s0:?} with {s:?}"));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for img in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[img * chunk..(img + 1) * chunk]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Record::Concat(inputs.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Record::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() < 2 {
            return shape_err(format!("flatten needs a batch axis, got {s:?}"));
        }
        let shape = vec![s[0], s[1..].iter().product()];
        self.reshape(x, shape)
    }

    /// Nearest-neighbour resize of the two trailing axes.
    pub fn upsample_nearest(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "upsample")?;
        if height == 0 || width == 0 {
            return shape_err("upsample target must be non-empty".into());
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..height {
                let si = i * h / height;
                for j in 0..width {
                    out.push(xd[base + si * w + j * w / width]);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, height, width], out);
        Ok(self.unary(x, value, Record::Upsample(x)))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "max pool")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return shape_err(format!("max pool needs at least 2x2, got {h}x{w}"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[k] > xd[best] {
                            best = k;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.unary(x, value, Record::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "global avg pool")?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.unary(x, value, Record::GlobalAvgPool(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = match *xv.shape() {
            [_, c] => c,
            ref s => return shape_err(format!("log_softmax expects rank 2, got {s:?}")),
        };
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.unary(x, value, Record::LogSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Record::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.unary(x, Tensor::scalar(s), Record::Mean(x))
    }

    /// Backpropagates from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<()> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    /// Accumulates `d output / d leaf`, weighted by `seed`, into every leaf
    /// that requires a gradient. Intermediate gradients are recomputed on
    /// every call; leaf gradients add up across calls.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        let out_shape = self.value(output).shape();
        if out_shape != seed.shape() {
            return shape_err(format!(
                "seed shape {:?} does not match output shape {out_shape:?}",
                seed.shape()
            ));
        }
        for node in &mut self.nodes {
            if !matches!(node.record, Record::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[output.0].grad, seed.data());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].record, Record::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            for (var, contrib) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut self.nodes[var.0].grad, &contrib);
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` for each input needing a gradient.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.record {
            Record::Leaf => {}
            Record::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, &mut da, false);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, &mut db, false);
                    res.push((*b, db));
                }
            }
            Record::Conv2d {
                x,
                w,
                bias,
                padding,
            } => {
                res.extend(self.conv2d_grads(*x, *w, *bias, *padding, out.shape(), g));
            }
            Record::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        res.push((v, reduce_broadcast(self.value(v).shape(), out.shape(), g)));
                    }
                }
            }
            Record::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (v, other) in [(*a, bv), (*b, av)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let vs = self.value(v).shape();
                    let prod: Vec<f64> = if other.shape() == out.shape() {
                        g.iter().zip(other.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let offs = broadcast_offsets(other.shape(), out.shape());
                        g.iter()
                            .zip(offs)
                            .map(|(x, o)| x * other.data()[o])
                            .collect()
                    };
                    res.push((v, reduce_broadcast(vs, out.shape(), &prod)));
                }
            }
            Record::Relu(x) => {
                let xd = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xd)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                res.push((*x, d));
            }
            Record::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                res.push((*x, d));
            }
            Record::Log(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| g / x)
                    .collect();
                res.push((*x, d));
            }
            Record::Affine { x, scale } => {
                res.push((*x, g.iter().map(|g| g * scale).collect()));
            }
            Record::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                res.push((*x, d));
            }
            Record::ChannelMax { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                res.push((*x, d));
            }
            Record::ChannelAvg(x) => {
                let (n, c, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                let plane = h * w;
                let inv = 1.0 / c as f64;
                let mut d = vec![0.0; n * c * plane];
                for img in 0..n {
                    for ch in 0..c {
                        let dst = &mut d[(img * c + ch) * plane..(img * c + ch + 1) * plane];
                        for (dv, gv) in dst.iter_mut().zip(&g[img * plane..(img + 1) * plane]) {
                            *dv = gv * inv;
                        }
                    }
                }
                res.push((*x, d));
            }
            Record::Concat(inputs) => {
                let n = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let total_c = out.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let cv = self.value(v).shape()[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(n * cv * inner);
                        for img in 0..n {
                            let start = (img * total_c + offset) * inner;
                            d.extend_from_slice(&g[start..start + cv * inner]);
                        }
                        res.push((v, d));
                    }
                    offset += cv;
                }
            }
            Record::Reshape(x) => res.push((*x, g.to_vec())),
            Record::Upsample(x) => {
                let (_, _, h, w) = dims4(self.value(*x), "").expect("validated in forward");
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let mut d = vec![0.0; self.value(*x).len()];
                for (plane, gp) in g.chunks(oh * ow).enumerate() {
                    let base = plane * h * w;
                    for i in 0..oh {
                        let si = i * h / oh;
                        for j in 0..ow {
                            d[base + si * w + j * w / ow] += gp[i * ow + j];
                        }
                    }
                }
                res.push((*x, d));
            }
            Record::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                res.push((*x, d));
            }
            Record::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f64;
                let d = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat(gv * inv).take(plane))
                    .collect();
                res.push((*x, d));
            }
            Record::LogSoftmax(x) => {
                let cols = out.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(out.data().chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, y)| gv - y.exp() * total));
                }
                res.push((*x, d));
            }
            Record::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Record::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
        }
        res
    }

    fn conv2d_grads(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        padding: usize,
        out_shape: &[usize],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = dims4(xv, "").expect("validated in forward");
        let (o, _, kh, kw) = dims4(wv, "").expect("validated in forward");
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut dx = if want_x {
            vec![0.0; xv.len()]
        } else {
            Vec::new()
        };
        let mut dw = if want_w {
            vec![0.0; wv.len()]
        } else {
            Vec::new()
        };
        let (xd, wdata) = (xv.data(), wv.data());
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        let mut plane = vec![0.0; ph * pw];
        // dx is a correlation of g, padded by q, with the flipped kernel.
        let (qh, qw) = (kh - 1 - padding.min(kh - 1), kw - 1 - padding.min(kw - 1));
        let direct_dx = padding >= kh || padding >= kw;
        let (gh, gw) = (oh + 2 * qh, ow + 2 * qw);
        let q = qh.max(qw);
        let mut gplane = vec![0.0; (oh + 2 * q) * (ow + 2 * q)];
        let _ = (gh, gw);
        let flipped: Vec<f64> = if want_x && !direct_dx {
            (0..o * c)
                .flat_map(|k| wdata[k * kh * kw..(k + 1) * kh * kw].iter().rev().copied())
                .collect()
        } else {
            Vec::new()
        };
        let mut dplane = vec![0.0; if direct_dx { ph * pw } else { 0 }];
        for img in 0..n {
            if want_w {
                for ic in 0..c {
                    let xoff = (img * c + ic) * h * wd;
                    pad_plane(&xd[xoff..xoff + h * wd], h, wd, padding, &mut plane);
                    for oc in 0..o {
                        let gbase = (img * o + oc) * oh * ow;
                        let kbase = (oc * c + ic) * kh * kw;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut acc = 0.0;
                                for i in 0..oh {
                                    let r = (i + ki) * pw + kj;
                                    acc += dot(
                                        &g[gbase + i * ow..gbase + (i + 1) * ow],
                                        &plane[r..r + ow],
                                    );
                                }
                                dw[kbase + ki * kw + kj] += acc;
                            }
                        }
                    }
                }
            }
            if !want_x {
                continue;
            }
            for oc in 0..o {
                let gbase = (img * o + oc) * oh * ow;
                let gimg = &g[gbase..gbase + oh * ow];
                if direct_dx {
                    for ic in 0..c {
                        let xoff = (img * c + ic) * h * wd;
                        let kbase = (oc * c + ic) * kh * kw;
                        dplane.fill(0.0);
                        for i in 0..oh {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let r = (i + ki) * pw + kj;
                                    axpy(
                                        wdata[kbase + ki * kw + kj],
                                        &gimg[i * ow..(i + 1) * ow],
                                        &mut dplane[r..r + ow],
                                    );
                                }
                            }
                        }
                        for i in 0..h {
                            let r = (i + padding) * pw + padding;
                            let dst = &mut dx[xoff + i * wd..xoff + (i + 1) * wd];
                            for (d, v) in dst.iter_mut().zip(&dplane[r..r + wd]) {
                                *d += v;
                            }
                        }
                    }
                    continue;
                }
                pad_plane(
                    gimg,
                    oh,
                    ow,
                    qh.max(qw),
                    &mut gplane[..(oh + 2 * qh.max(qw)) * (ow + 2 * qh.max(qw))],
                );
                let q = qh.max(qw);
                let gpw = ow + 2 * q;
                for ic in 0..c {
                    let xoff = (img * c + ic) * h * wd;
                    let kbase = (oc * c + ic) * kh * kw;
                    // Offsets of the valid window inside the uniformly padded plane.
                    let off = (q - qh) * gpw + (q - qw);
                    correlate(
                        &gplane[off..],
                        gpw,
                        &flipped[kbase..kbase + kh * kw],
                        kh,
                        kw,
                        &mut dx[xoff..xoff + h * wd],
                        h,
                        wd,
                    );
                }
            }
        }
        let mut res = Vec::new();
        if want_x {
            res.push((x, dx));
        }
        if want_w {
            res.push((w, dw));
        }
        if let Some(b) = bias.filter(|b| self.wants(*b)) {
            let mut db = vec![0.0; o];
            for (k, chunk) in g.chunks(oh * ow).enumerate() {
                db[k % o] += chunk.iter().sum::<f64>();
            }
            res.push((b, db));
        }
        res
    }
}

/// Copies an `h x w` plane into the centre of a zeroed `(h+2p) x (w+2p)` buffer.
fn pad_plane(src: &[f64], h: usize, w: usize, p: usize, dst: &mut [f64]) {
    let pw = w + 2 * p;
    if p > 0 {
        dst.fill(0.0);
    }
    for i in 0..h {
        dst[(i + p) * pw + p..(i + p) * pw + p + w].copy_from_slice(&src[i * w..(i + 1) * w]);
    }
}

/// `out[i, j] += sum_{a, b} kern[a, b] * input[(i + a) * stride + j + b]`.
#[allow(clippy::too_many_arguments)]
fn correlate(
    input: &[f64],
    stride: usize,
    kern: &[f64],
    kh: usize,
    kw: usize,
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    for i in 0..oh {
        let orow = &mut out[i * ow..(i + 1) * ow];
        let mut j = 0;
        while j + 8 <= ow {
            correlate_block::<8>(input, stride, kern, kh, kw, i, j, &mut orow[j..j + 8]);
            j += 8;
        }
        while j + 4 <= ow {
            correlate_block::<4>(input, stride, kern, kh, kw, i, j, &mut orow[j..j + 4]);
            j += 4;
        }
        while j < ow {
            correlate_block::<1>(input, stride, kern, kh, kw, i, j, &mut orow[j..j + 1]);
            j += 1;
        }
    }
}

/// `B` adjacent outputs of one row, accumulated in registers.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn correlate_block<const B: usize>(
    input: &[f64],
    stride: usize,
    kern: &[f64],
    kh: usize,
    kw: usize,
    i: usize,
    j: usize,
    out: &mut [f64],
) {
    let mut acc = [0.0; B];
    for a in 0..kh {
        let row = &input[(i + a) * stride + j..(i + a) * stride + j + kw - 1 + B];
        let krow = &kern[a * kw..(a + 1) * kw];
        for (b, &kv) in krow.iter().enumerate() {
            let src: &[f64; B] = row[b..b + B].try_into().expect("block width");
            for t in 0..B {
                acc[t] += kv * src[t];
            }
        }
    }
    for t in 0..B {
        out[t] += acc[t];
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

/// Sums a gradient of broadcast shape `out` back down to `input`.
fn reduce_broadcast(input: &[usize], out: &[usize], g: &[f64]) -> Vec<f64> {
    if input == out {
        return g.to_vec();
    }
    let offs = broadcast_offsets(input, out);
    let mut d = vec![0.0; input.iter().product()];
    for (gv, o) in g.iter().zip(offs) {
        d[o] += gv;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn padded_conv_keeps_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(&[3, 2, 3, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3], 0.5));
        let y = tape.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 5, 5]);
        // corner sees a 2x2 window in each of 2 channels
        assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 8.5);
        assert_eq!(tape.value(y).at(&[1, 2, 2, 2]), 18.5);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        tape.backward_scalar(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let y = tape.sigmoid(x);
        tape.backward_scalar(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_subgradient_at_kink_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), true);
        let r = tape.relu(x);
        let y = tape.sum(r);
        tape.backward_scalar(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn reuse_doubles_gradient_exactly() {
        let point = t(&[4], &[0.3, -1.2, 2.5, 0.7]);
        let once = {
            let mut tape = Tape::new();
            let x = tape.leaf(point.clone(), true);
            let s = tape.sigmoid(x);
            let y = tape.sum(s);
            tape.backward_scalar(y).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let twice = {
            let mut tape = Tape::new();
            let x = tape.leaf(point, true);
            let s1 = tape.sigmoid(x);
            let s2 = tape.sigmoid(x);
            let a = tape.add(s1, s2).unwrap();
            let y = tape.sum(a);
            tape.backward_scalar(y).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4, 3], 1.0), true);
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).at(&[3, 2]), 4.0);
        let s = tape.sum(y);
        tape.backward_scalar(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 4.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn errors_are_descriptive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(z), Err(Error::Domain(_))));
        let y = tape.sum(a);
        assert!(matches!(
            tape.backward(y, &Tensor::zeros(&[2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_on_empty_tape_is_noop() {
        let mut other = Tape::new();
        let v = other.constant(Tensor::scalar(1.0));
        let mut tape = Tape::new();
        tape.backward_scalar(v).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn upsample_and_pools() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = tape.upsample_nearest(x, 4, 4).unwrap();
        assert_eq!(
            tape.value(u).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let m = tape.max_pool2(u).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0, 4.0]);
        let g = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(g).data(), &[2.5]);
    }
}
