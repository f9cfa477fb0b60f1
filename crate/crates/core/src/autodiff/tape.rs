use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, Padding, PoolGeometry, Strides};
use super::params::{ParamId, ParamStore};
use crate::capsnet::MarginLossParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BatchNormMode<'s> {
    /// Normalize with the batch's own per-channel mean and variance.
    Train,
    /// Normalize with fixed (running) statistics.
    Eval { mean: &'s [f64], var: &'s [f64] },
}

/// Output of a batch-norm op: the normalized value plus, in training mode,
/// the batch statistics used.
#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub out: Var,
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

/// Injected defect in a backward rule, used to prove gradient checks can fail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Multiplies every activation's local derivative by the given factor.
    ScaleActivationGrad(f64),
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    BroadcastTo(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
        batch: usize,
        cols: Vec<Vec<f64>>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    AvgPool {
        x: Var,
        geom: PoolGeometry,
        batch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        batch: usize,
        hw: usize,
        c: usize,
    },
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        n: usize,
        m: usize,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Squash(Var),
    CapsuleTransform {
        u: Var,
        w: Var,
        n_in: usize,
        classes: usize,
        d_in: usize,
        d_out: usize,
    },
    MarginLoss {
        v: Var,
        target: Vec<f64>,
        params: MarginLossParams,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed primitive ops, in execution order.
///
/// Parameter values are borrowed from their [`ParamStore`], so building a tape
/// never copies weights.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
    check_finite: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_of(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Splits a rank-3 `HxWxC` or rank-4 `NxHxWxC` shape into `(N, H, W, C)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::shape(op, "HxWxC or NxHxWxC", format!("{shape:?}"))),
    }
}

fn out_image_shape(batched: bool, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if batched {
        vec![n, h, w, c]
    } else {
        vec![h, w, c]
    }
}

/// Maps each output offset of a broadcast to its source offset.
fn broadcast_index(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < dst[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
            check_finite: false,
        }
    }

    /// Panic as soon as any op produces a NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn with_fault(mut self, fault: Option<BackwardFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Input | Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        if self.check_finite {
            assert!(value.is_finite(), "non-finite value produced by {op:?}");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.push(Cow::Owned(value), op, inputs)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Constant, &[])
    }

    /// A borrowed value that receives no gradient.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant, &[])
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Input, &[])
    }

    /// Leaf for a model parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// Same value, cut out of the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_owned(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push_owned(t, Op::Scale(x, factor), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push_owned(t, Op::Reshape(x), &[x]))
    }

    /// Broadcasts extents of size 1 up to `shape` (ranks must agree).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let ok = src.len() == shape.len()
            && src.iter().zip(shape).all(|(&s, &d)| s == d || s == 1);
        if !ok {
            return Err(Error::shape("broadcast_to", format!("{shape:?}"), format!("{src:?}")));
        }
        let map = broadcast_index(&src, shape);
        let xs = self.value(x).data();
        let data = map.iter().map(|&i| xs[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push_owned(t, Op::BroadcastTo(x), &[x]))
    }

    /// Sums over `axis`, dropping it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = dims_of(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &xs[(o * n + k) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let t = Tensor::new(&new_shape, out)?;
        Ok(self.push_owned(t, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_owned(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Cross-correlation of an `HxWxCin` (or `NxHxWxCin`) input with a
    /// `KhxKwxCinxCout` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, h, w, cin) = image_dims("conv2d", &xs)?;
        let ks = self.shape(k).to_vec();
        let [kh, kw, kcin, cout] = ks[..] else {
            return Err(Error::shape("conv2d", "kernel KhxKwxCinxCout", format!("{ks:?}")));
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel input channels {cin}"),
                format!("{kcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let geom = ConvGeometry::new(h, w, cin, kh, kw, cout, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel no larger than input {h}x{w}"),
                format!("{kh}x{kw}"),
            )
        })?;
        let input = self.value(x).data();
        let kernel = self.value(k).data();
        let mut out = vec![0.0; n * geom.out_len()];
        let mut cols = Vec::with_capacity(n);
        for (img, dst) in input.chunks(geom.in_len()).zip(out.chunks_mut(geom.out_len())) {
            cols.push(kernels::conv2d_forward(&geom, img, kernel, dst));
        }
        let shape = out_image_shape(xs.len() == 4, n, geom.out_h, geom.out_w, cout);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_owned(
            t,
            Op::Conv2d {
                x,
                k,
                geom,
                batch: n,
                cols,
            },
            &[x, k],
        ))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", format!("[{c}]"), format!("{:?}", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        Ok(self.push_owned(t, Op::AddBias { x, b }, &[x, b]))
    }

    fn pool_geom(&self, op: &'static str, x: Var, window: usize, stride: usize) -> Result<(usize, PoolGeometry)> {
        if window == 0 {
            return Err(Error::InvalidArgument(format!("{op}: window must be >= 1")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        let (n, h, w, c) = image_dims(op, self.shape(x))?;
        let g = PoolGeometry::new(h, w, c, window, stride).ok_or_else(|| {
            Error::shape(op, format!("window no larger than {h}x{w}"), format!("{window}"))
        })?;
        Ok((n, g))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, geom) = self.pool_geom("avg_pool", x, window, stride)?;
        let input = self.value(x).data();
        let mut out = vec![0.0; n * geom.out_len()];
        for (img, dst) in input.chunks(geom.in_len()).zip(out.chunks_mut(geom.out_len())) {
            kernels::avg_pool_forward(&geom, img, dst);
        }
        let shape = out_image_shape(self.shape(x).len() == 4, n, geom.out_h, geom.out_w, geom.c);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_owned(t, Op::AvgPool { x, geom, batch: n }, &[x]))
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, geom) = self.pool_geom("max_pool", x, window, stride)?;
        let input = self.value(x).data();
        let mut out = vec![0.0; n * geom.out_len()];
        let mut argmax = vec![0usize; n * geom.out_len()];
        for (b, img) in input.chunks(geom.in_len()).enumerate() {
            let range = b * geom.out_len()..(b + 1) * geom.out_len();
            kernels::max_pool_forward(&geom, img, &mut out[range.clone()], &mut argmax[range]);
            for a in &mut argmax[b * geom.out_len()..(b + 1) * geom.out_len()] {
                *a += b * geom.in_len();
            }
        }
        let shape = out_image_shape(self.shape(x).len() == 4, n, geom.out_h, geom.out_w, geom.c);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_owned(t, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean over the spatial extent: `HxWxC -> C`, `NxHxWxC -> NxC`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, h, w, c) = image_dims("global_avg_pool", &xs)?;
        let hw = h * w;
        let input = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[b * c + ch] += input[(b * hw + p) * c + ch];
                }
            }
        }
        let inv = 1.0 / hw as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = if xs.len() == 4 { vec![n, c] } else { vec![c] };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_owned(t, Op::GlobalAvgPool { x, batch: n, hw, c }, &[x]))
    }

    /// `x · W + b` for `x` of shape `[N]` or `[B, N]`, `W` of shape `[N, M]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, n) = match xs[..] {
            [n] => (1, n),
            [r, n] => (r, n),
            _ => return Err(Error::shape("fully_connected", "[N] or [B, N]", format!("{xs:?}"))),
        };
        let ws = self.shape(w).to_vec();
        let [wn, m] = ws[..] else {
            return Err(Error::shape("fully_connected", "weights [N, M]", format!("{ws:?}")));
        };
        if wn != n {
            return Err(Error::shape("fully_connected", format!("weights [{n}, M]"), format!("{ws:?}")));
        }
        if self.shape(b) != [m] {
            return Err(Error::shape("fully_connected", format!("bias [{m}]"), format!("{:?}", self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm(
            rows,
            n,
            m,
            self.value(x).data(),
            Strides::row_major(n),
            self.value(w).data(),
            Strides::row_major(m),
            &mut out,
            1.0,
        );
        let shape = if xs.len() == 2 { vec![rows, m] } else { vec![m] };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push_owned(t, Op::FullyConnected { x, w, b, rows, n, m }, &[x, w, b]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push_owned(t, Op::Activation { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = softmax_tensor(self.value(x), axis)?;
        Ok(self.push_owned(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Capsule squash applied to every vector along the last axis.
    pub fn squash(&mut self, x: Var) -> Var {
        let t = squash_tensor(self.value(x));
        self.push_owned(t, Op::Squash(x), &[x])
    }

    /// Prediction vectors `û[i,j,:] = u[i,:] · W[i,j,:,:]` for `u` of shape
    /// `[N_in, D1]` and `W` of shape `[N_in, C, D1, D2]`.
    pub fn capsule_transform(&mut self, u: Var, w: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n_in, d_in], &[wn, classes, wd, d_out]) = (&us[..], &ws[..]) else {
            return Err(Error::shape(
                "capsule_transform",
                "u [N_in, D1], W [N_in, C, D1, D2]",
                format!("{us:?}, {ws:?}"),
            ));
        };
        if wn != n_in || wd != d_in {
            return Err(Error::shape(
                "capsule_transform",
                format!("W [{n_in}, C, {d_in}, D2]"),
                format!("{ws:?}"),
            ));
        }
        let (ud, wdat) = (self.value(u).data(), self.value(w).data());
        let mut out = vec![0.0; n_in * classes * d_out];
        for i in 0..n_in {
            let ui = &ud[i * d_in..][..d_in];
            for j in 0..classes {
                let dst = &mut out[(i * classes + j) * d_out..][..d_out];
                let wij = &wdat[(i * classes + j) * d_in * d_out..][..d_in * d_out];
                for (d, &uv) in ui.iter().enumerate() {
                    for (o, wv) in dst.iter_mut().zip(&wij[d * d_out..][..d_out]) {
                        *o += uv * wv;
                    }
                }
            }
        }
        let t = Tensor::new(&[n_in, classes, d_out], out)?;
        Ok(self.push_owned(
            t,
            Op::CapsuleTransform {
                u,
                w,
                n_in,
                classes,
                d_in,
                d_out,
            },
            &[u, w],
        ))
    }

    /// Margin loss over capsule outputs `v` (`[C, D]`) against target vector `T`.
    pub fn margin_loss(&mut self, v: Var, target: &[f64], params: MarginLossParams) -> Result<Var> {
        let vs = self.shape(v);
        if vs.len() != 2 || vs[0] != target.len() {
            return Err(Error::shape(
                "margin_loss",
                format!("[{}, D]", target.len()),
                format!("{vs:?}"),
            ));
        }
        let loss = margin_loss_value(self.value(v), target, &params);
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::MarginLoss {
                v,
                target: target.to_vec(),
                params,
            },
            &[v],
        ))
    }

    /// Mean softmax cross-entropy of `[C]` or `[B, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let (rows, c) = match ls[..] {
            [c] => (1, c),
            [r, c] => (r, c),
            _ => return Err(Error::shape("softmax_cross_entropy", "[C] or [B, C]", format!("{ls:?}"))),
        };
        if targets.len() != rows || targets.iter().any(|&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy: need {rows} targets in [0, {c}), got {targets:?}"
            )));
        }
        let probs = softmax_tensor(&self.value(logits).reshape(&[rows, c])?, 1)?.into_data();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[r * c + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / rows as f64;
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-channel batch normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<BatchNormOutput> {
        let c = *self.shape(x).last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", format!("[{c}]"), format!("{:?}", self.shape(p))));
            }
        }
        let xd = self.value(x).data();
        let count = (xd.len() / c) as f64;
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; c];
                for row in xd.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= count);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", format!("{c} running stats"), format!("{}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + bt[ch]);
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let out = self.push_owned(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok(BatchNormOutput {
            out,
            batch_mean: train.then_some(mean),
            batch_var: train.then_some(var),
        })
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Every node reachable from `loss` is visited exactly once, in reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let t = mul_tensors(g, self.value(*b));
                    self.accumulate(grads, *a, t)?;
                }
                if self.wants(*b) {
                    let t = mul_tensors(g, self.value(*a));
                    self.accumulate(grads, *b, t)?;
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f))?,
            Op::Reshape(x) => self.accumulate(grads, *x, g.reshape(self.shape(*x))?)?,
            Op::BroadcastTo(x) => {
                let src = self.shape(*x);
                let map = broadcast_index(src, g.shape());
                let mut out = Tensor::zeros(src);
                let od = out.data_mut();
                for (&i, v) in map.iter().zip(gd) {
                    od[i] += v;
                }
                self.accumulate(grads, *x, out)?;
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = dims_of(shape, *axis);
                let mut out = Tensor::zeros(shape);
                let od = out.data_mut();
                for o in 0..outer {
                    for k in 0..n {
                        od[(o * n + k) * inner..][..inner].copy_from_slice(&gd[o * inner..][..inner]);
                    }
                }
                self.accumulate(grads, *x, out)?;
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, t)?;
            }
            Op::Conv2d {
                x,
                k,
                geom,
                batch,
                cols,
            } => {
                if self.wants(*k) {
                    let mut dk = Tensor::zeros(self.shape(*k));
                    for (b, col) in cols.iter().enumerate() {
                        let go = &gd[b * geom.out_len()..][..geom.out_len()];
                        kernels::conv2d_grad_kernel(geom, col, go, dk.data_mut());
                    }
                    self.accumulate(grads, *k, dk)?;
                }
                if self.wants(*x) {
                    let kernel = self.value(*k).data();
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for b in 0..*batch {
                        let go = &gd[b * geom.out_len()..][..geom.out_len()];
                        let dst = &mut dx.data_mut()[b * geom.in_len()..][..geom.in_len()];
                        kernels::conv2d_grad_input(geom, kernel, go, dst);
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(db))?;
                }
            }
            Op::AvgPool { x, geom, batch } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for b in 0..*batch {
                    let go = &gd[b * geom.out_len()..][..geom.out_len()];
                    let dst = &mut dx.data_mut()[b * geom.in_len()..][..geom.in_len()];
                    kernels::avg_pool_backward(geom, go, dst);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let dd = dx.data_mut();
                for (&i, v) in argmax.iter().zip(gd) {
                    dd[i] += v;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::GlobalAvgPool { x, batch, hw, c } => {
                let inv = 1.0 / *hw as f64;
                let mut dx = Tensor::zeros(self.shape(*x));
                let dd = dx.data_mut();
                for b in 0..*batch {
                    for p in 0..*hw {
                        for ch in 0..*c {
                            dd[(b * hw + p) * c + ch] = gd[b * c + ch] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::FullyConnected { x, w, b, rows, n, m } => {
                let (rows, n, m) = (*rows, *n, *m);
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    kernels::gemm(
                        rows,
                        m,
                        n,
                        gd,
                        Strides::row_major(m),
                        self.value(*w).data(),
                        Strides::transposed(m),
                        dx.data_mut(),
                        0.0,
                    );
                    self.accumulate(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(&[n, m]);
                    kernels::gemm(
                        n,
                        rows,
                        m,
                        self.value(*x).data(),
                        Strides::transposed(n),
                        gd,
                        Strides::row_major(m),
                        dw.data_mut(),
                        0.0,
                    );
                    self.accumulate(grads, *w, dw)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; m];
                    for row in gd.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(db))?;
                }
            }
            Op::Activation { x, kind } => {
                let scale = match self.fault {
                    Some(BackwardFault::ScaleActivationGrad(f)) => f,
                    None => 1.0,
                };
                let (xs, ys) = (self.value(*x).data(), node.value.data());
                let data = gd
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(go, (&xv, &yv))| go * kind.derivative(xv, yv) * scale)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data)?)?;
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = dims_of(g.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| y[at(k)] * gd[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
            }
            Op::Squash(x) => {
                let s = self.value(*x);
                let d = *s.shape().last().unwrap();
                let mut dx = Vec::with_capacity(s.len());
                for (row, grow) in s.data().chunks(d).zip(gd.chunks(d)) {
                    squash_backward_row(row, grow, &mut dx);
                }
                self.accumulate(grads, *x, Tensor::new(s.shape(), dx)?)?;
            }
            Op::CapsuleTransform {
                u,
                w,
                n_in,
                classes,
                d_in,
                d_out,
            } => {
                let (n_in, classes, d_in, d_out) = (*n_in, *classes, *d_in, *d_out);
                let (ud, wd) = (self.value(*u).data(), self.value(*w).data());
                if self.wants(*u) {
                    let mut du = vec![0.0; n_in * d_in];
                    for i in 0..n_in {
                        for j in 0..classes {
                            let go = &gd[(i * classes + j) * d_out..][..d_out];
                            let wij = &wd[(i * classes + j) * d_in * d_out..][..d_in * d_out];
                            for d in 0..d_in {
                                let row = &wij[d * d_out..][..d_out];
                                du[i * d_in + d] += row.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    self.accumulate(grads, *u, Tensor::new(&[n_in, d_in], du)?)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; wd.len()];
                    for i in 0..n_in {
                        let ui = &ud[i * d_in..][..d_in];
                        for j in 0..classes {
                            let go = &gd[(i * classes + j) * d_out..][..d_out];
                            let dst = &mut dw[(i * classes + j) * d_in * d_out..][..d_in * d_out];
                            for (d, &uv) in ui.iter().enumerate() {
                                for (o, gv) in dst[d * d_out..][..d_out].iter_mut().zip(go) {
                                    *o = uv * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?)?;
                }
            }
            Op::MarginLoss { v, target, params } => {
                let vt = self.value(*v);
                let d = vt.shape()[1];
                let mut dv = Vec::with_capacity(vt.len());
                for (row, &t) in vt.data().chunks(d).zip(target) {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dn = -2.0 * t * (params.m_plus - norm).max(0.0)
                        + 2.0 * params.lambda * (1.0 - t) * (norm - params.m_minus).max(0.0);
                    let f = if norm > 0.0 { gd[0] * dn / norm } else { 0.0 };
                    dv.extend(row.iter().map(|x| x * f));
                }
                self.accumulate(grads, *v, Tensor::new(vt.shape(), dv)?)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let c = probs.len() / rows;
                let f = gd[0] / rows as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * f).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= f;
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits), dl)?)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let count = (gd.len() / c) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(gd.len());
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let v = if *train {
                                gam[ch] * inv_std[ch] / count
                                    * (count * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch])
                            } else {
                                gam[ch] * inv_std[ch] * grow[ch]
                            };
                            dx.push(v);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(dgamma))?;
                self.accumulate(grads, *beta, Tensor::from_vec(dbeta))?;
            }
        }
        Ok(())
    }
}

fn mul_tensors(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf (input or parameter) node; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per parameter of `store`, zero for parameters the loss
    /// does not touch.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.zeros_like();
        for (p, v) in self.params {
            if let Some(g) = self.grads[v.0].take() {
                out[p.index()] = g;
            }
        }
        out
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax: axis {axis} out of range for {shape:?}"
        )));
    }
    let (outer, n, inner) = dims_of(shape, axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(shape, out)
}

/// `v = s · ||s|| / (1 + ||s||²)`, which equals `(||s||²/(1+||s||²)) · s/||s||`
/// and is exactly zero at `s = 0`.
pub fn squash_vec(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let f = n2.sqrt() / (1.0 + n2);
    s.iter().map(|x| x * f).collect()
}

/// Squash along the last axis of a plain tensor.
pub fn squash_tensor(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let data = x.data().chunks(d).flat_map(squash_vec).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Floor on `||s||` where the squash derivative divides by it.
const SQUASH_NORM_FLOOR: f64 = 1e-6;

fn squash_backward_row(s: &[f64], gv: &[f64], out: &mut Vec<f64>) {
    // v = s·f(n), f(n) = n/(1+n²); dv/ds = f·I + (f'(n)/n)·s sᵀ.
    let n2: f64 = s.iter().map(|x| x * x).sum();
    let n = n2.sqrt();
    let f = n / (1.0 + n2);
    let f_prime = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
    let guarded = n.max(SQUASH_NORM_FLOOR);
    let s_dot_g: f64 = s.iter().zip(gv).map(|(a, b)| a * b).sum();
    let k = f_prime / guarded * s_dot_g;
    out.extend(s.iter().zip(gv).map(|(sv, g)| f * g + k * sv));
}

/// Plain-value margin loss.
pub(crate) fn margin_loss_value(v: &Tensor, target: &[f64], p: &MarginLossParams) -> f64 {
    let d = v.shape()[1];
    v.data()
        .chunks(d)
        .zip(target)
        .map(|(row, &t)| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let hi = (p.m_plus - norm).max(0.0);
            let lo = (norm - p.m_minus).max(0.0);
            t * hi * hi + p.lambda * (1.0 - t) * lo * lo
        })
        .sum()
}
