//! Dynamic reverse-mode differentiation over a tape of dense ops.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op computes its value
//! eagerly when recorded; [`Graph::backward`] walks the tape in reverse and
//! returns per-node gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input,
    Param,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Reshape(Var, Vec<usize>),
    L2Normalize(Var),
    Dot(Var, Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    LogSumExp(Var),
    Select(Var, usize),
    BceWithLogits { logit: Var, target: f64 },
    SmoothL1 { pred: Var, target: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(a)
            | Op::Reshape(a, _)
            | Op::L2Normalize(a)
            | Op::Scale(a, _)
            | Op::LogSumExp(a)
            | Op::Select(a, _) => vec![*a],
            Op::Dot(a, b) | Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::Concat(vs) => vs.clone(),
            Op::BceWithLogits { logit, .. } => vec![*logit],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    params: BTreeMap<String, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// Value of a single-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.values[var.0].data()[0]
    }

    pub(crate) fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub(crate) fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Parameter leaves recorded so far, keyed by store key.
    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval_op(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    /// Records a constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.ops.push(Op::Input);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    /// Records (once per key) a trainable leaf taken from `store`.
    pub fn param(&mut self, store: &ParamStore, key: &str) -> Result<Var> {
        if let Some(v) = self.params.get(key) {
            return Ok(*v);
        }
        let mut value = store
            .get(key)
            .ok_or_else(|| Error::MissingParameter(key.to_string()))?
            .clone();
        value.clear_grad();
        self.ops.push(Op::Param);
        self.values.push(value);
        let var = Var(self.ops.len() - 1);
        self.params.insert(key.to_string(), var);
        Ok(var)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
            stride,
        })
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.push(Op::Linear {
            input,
            weight,
            bias,
        })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Relu(input))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape(input, shape))
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.values[input.0].len();
        self.reshape(input, vec![n])
    }

    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        self.push(Op::L2Normalize(input))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Dot(a, b))
    }

    pub fn concat(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::Concat(parts))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(input, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn log_sum_exp(&mut self, input: Var) -> Result<Var> {
        self.push(Op::LogSumExp(input))
    }

    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        self.push(Op::Select(input, index))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        self.push(Op::BceWithLogits { logit, target })
    }

    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        self.push(Op::SmoothL1 { pred, target })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        self.push(Op::WeightedSum(terms))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        self.weighted_sum(terms.iter().map(|v| (*v, 1.0)).collect())
    }

    pub fn mean(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("mean of no terms".into()));
        }
        let w = 1.0 / terms.len() as f64;
        self.weighted_sum(terms.iter().map(|v| (*v, w)).collect())
    }

    /// Reverse-mode gradients of a single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.values[loss.0];
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backward_op(&self.ops[i], &self.values, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (key, var) in &self.params {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(key, g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn scalar_of(t: &Tensor, op: &'static str) -> Result<f64> {
    if t.len() != 1 {
        return Err(Error::shape(op, format!("expected scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

pub(crate) fn conv_output_size(
    input: usize,
    kernel: usize,
    padding: usize,
    stride: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` in `start..end` for which `o * stride + k - pad` indexes the input.
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let (k, pad, stride, in_len) = (k as i64, pad as i64, stride as i64, in_len as i64);
    let start = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    let last = in_len - 1 + pad - k;
    if last < 0 {
        return (0, 0);
    }
    let end = (last / stride + 1).min(out_len as i64);
    (start as usize, end.max(start) as usize)
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize, stride: usize) -> Result<ConvDims> {
    let [c_in, h, w] = input.shape() else {
        return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {:?}", input.shape())));
    };
    let [c_out, k_in, kh, kw] = kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [C_out,C_in,kH,kW], got {:?}", kernel.shape()),
        ));
    };
    if k_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {k_in} input channels, input has {c_in}"),
        ));
    }
    if bias.shape() != [*c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{c_out}], got {:?}", bias.shape()),
        ));
    }
    let oh = conv_output_size(*h, *kh, padding, stride);
    let ow = conv_output_size(*w, *kw, padding, stride);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}, stride {stride}"),
        ));
    };
    Ok(ConvDims {
        c_in: *c_in,
        h: *h,
        w: *w,
        c_out: *c_out,
        kh: *kh,
        kw: *kw,
        oh,
        ow,
    })
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias, padding, stride)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; d.c_out * d.oh * d.ow];
    for co in 0..d.c_out {
        let plane = &mut out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..d.c_in {
            let xin = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let (oy0, oy1) = valid_range(d.oh, d.h, ky, padding, stride);
                for kx in 0..d.kw {
                    let wv = k[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                    let (ox0, ox1) = valid_range(d.ow, d.w, kx, padding, stride);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let orow = &mut plane[oy * d.ow..(oy + 1) * d.ow];
                        let irow = &xin[iy * d.w..(iy + 1) * d.w];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * irow[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.oh, d.ow], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
    g: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = conv_dims(input, kernel, bias, padding, stride)?;
    let x = input.data();
    let k = kernel.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; d.c_out];
    for co in 0..d.c_out {
        let gplane = &g[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        gb[co] = gplane.iter().sum();
        for ci in 0..d.c_in {
            let xin = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let gxin = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let (oy0, oy1) = valid_range(d.oh, d.h, ky, padding, stride);
                for kx in 0..d.kw {
                    let widx = ((co * d.c_in + ci) * d.kh + ky) * d.kw + kx;
                    let wv = k[widx];
                    let (ox0, ox1) = valid_range(d.ow, d.w, kx, padding, stride);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let grow = &gplane[oy * d.ow..(oy + 1) * d.ow];
                        let irow = &xin[iy * d.w..(iy + 1) * d.w];
                        let gxrow = &mut gxin[iy * d.w..(iy + 1) * d.w];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - padding;
                            acc += grow[ox] * irow[ix];
                            gxrow[ix] += wv * grow[ox];
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    Ok((gx, gk, gb))
}

fn linear_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [d_out, d_in] = weight.shape() else {
        return Err(Error::shape(
            "fully_connected",
            format!("weight must be [D_out,D_in], got {:?}", weight.shape()),
        ));
    };
    if input.rank() != 1 || input.len() != *d_in {
        return Err(Error::shape(
            "fully_connected",
            format!("input {:?} does not match weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if bias.shape() != [*d_out] {
        return Err(Error::shape(
            "fully_connected",
            format!("bias must be [{d_out}], got {:?}", bias.shape()),
        ));
    }
    Ok((*d_out, *d_in))
}

fn same_len(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn eval_op(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let v = |var: &Var| &values[var.0];
    match op {
        Op::Input | Op::Param => Err(Error::InvalidArgument("leaf nodes are not evaluated".into())),
        Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
            stride,
        } => conv2d_forward(v(input), v(kernel), v(bias), *padding, *stride),
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (x, w, b) = (v(input), v(weight), v(bias));
            let (d_out, d_in) = linear_dims(x, w, b)?;
            let out = (0..d_out)
                .map(|o| b.data()[o] + tensor::dot(&w.data()[o * d_in..(o + 1) * d_in], x.data()))
                .collect();
            Ok(Tensor::vector(out))
        }
        Op::Relu(a) => {
            let a = v(a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.max(0.0)).collect())
        }
        Op::Reshape(a, shape) => v(a).clone().reshape(shape.clone()),
        Op::L2Normalize(a) => {
            let a = v(a);
            let n = a.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm);
            }
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x / n).collect())
        }
        Op::Dot(a, b) => {
            same_len(v(a), v(b), "dot")?;
            Ok(Tensor::scalar(tensor::dot(v(a).data(), v(b).data())))
        }
        Op::Concat(parts) => Ok(Tensor::vector(
            parts.iter().flat_map(|p| v(p).data().iter().copied()).collect(),
        )),
        Op::Scale(a, c) => {
            let a = v(a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (x, y) = (v(a), v(b));
            if x.shape() != y.shape() {
                return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(p, q)| p + sign * q).collect(),
            )
        }
        Op::LogSumExp(a) => {
            let a = v(a);
            if a.is_empty() {
                return Err(Error::shape("log_sum_exp", "empty input"));
            }
            let m = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = a.data().iter().map(|x| (x - m).exp()).sum();
            Ok(Tensor::scalar(m + s.ln()))
        }
        Op::Select(a, i) => {
            let a = v(a);
            let x = a
                .data()
                .get(*i)
                .ok_or_else(|| Error::shape("select", format!("index {i} out of {}", a.len())))?;
            Ok(Tensor::scalar(*x))
        }
        Op::BceWithLogits { logit, target } => {
            let z = scalar_of(v(logit), "bce_with_logits")?;
            Ok(Tensor::scalar(z.max(0.0) - target * z + (-z.abs()).exp().ln_1p()))
        }
        Op::SmoothL1 { pred, target } => {
            let p = v(pred);
            if p.len() != target.len() {
                return Err(Error::shape(
                    "smooth_l1",
                    format!("prediction has {} values, target {}", p.len(), target.len()),
                ));
            }
            Ok(Tensor::scalar(smooth_l1(p.data(), target)))
        }
        Op::WeightedSum(terms) => {
            let Some((first, _)) = terms.first() else {
                return Err(Error::shape("weighted_sum", "no terms"));
            };
            let shape = v(first).shape().to_vec();
            let mut out = vec![0.0; v(first).len()];
            for (t, w) in terms {
                let t = v(t);
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("weighted_sum", format!("{:?} vs {shape:?}", t.shape())));
                }
                for (o, x) in out.iter_mut().zip(t.data()) {
                    *o += w * x;
                }
            }
            Tensor::new(shape, out)
        }
    }
}

/// Sum over elements of 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum()
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn backward_op(op: &Op, values: &[Tensor], out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let v = |var: &Var| &values[var.0];
    match op {
        Op::Input | Op::Param => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
            stride,
        } => {
            let (gx, gk, gb) = conv2d_backward(v(input), v(kernel), v(bias), *padding, *stride, g)?;
            accumulate(grads, *input, &gx);
            accumulate(grads, *kernel, &gk);
            accumulate(grads, *bias, &gb);
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (x, w) = (v(input), v(weight));
            let (d_out, d_in) = linear_dims(x, w, v(bias))?;
            let mut gx = vec![0.0; d_in];
            let mut gw = vec![0.0; d_out * d_in];
            for o in 0..d_out {
                let row = &w.data()[o * d_in..(o + 1) * d_in];
                let grow = &mut gw[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    gx[i] += row[i] * g[o];
                    grow[i] = g[o] * x.data()[i];
                }
            }
            accumulate(grads, *input, &gx);
            accumulate(grads, *weight, &gw);
            accumulate(grads, *bias, g);
        }
        Op::Relu(a) => {
            let d: Vec<f64> = v(a)
                .data()
                .iter()
                .zip(g)
                .map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(grads, *a, &d);
        }
        Op::Reshape(a, _) => accumulate(grads, *a, g),
        Op::L2Normalize(a) => {
            let x = v(a);
            let y = &values[out];
            let n = x.norm();
            let yg = tensor::dot(y.data(), g);
            let d: Vec<f64> = y.data().iter().zip(g).map(|(yi, gi)| (gi - yi * yg) / n).collect();
            accumulate(grads, *a, &d);
        }
        Op::Dot(a, b) => {
            let da: Vec<f64> = v(b).data().iter().map(|x| x * g[0]).collect();
            let db: Vec<f64> = v(a).data().iter().map(|x| x * g[0]).collect();
            accumulate(grads, *a, &da);
            accumulate(grads, *b, &db);
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let n = v(p).len();
                accumulate(grads, *p, &g[off..off + n]);
                off += n;
            }
        }
        Op::Scale(a, c) => {
            let d: Vec<f64> = g.iter().map(|x| x * c).collect();
            accumulate(grads, *a, &d);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g);
            accumulate(grads, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g);
            let d: Vec<f64> = g.iter().map(|x| -x).collect();
            accumulate(grads, *b, &d);
        }
        Op::LogSumExp(a) => {
            let lse = values[out].data()[0];
            let d: Vec<f64> = v(a).data().iter().map(|x| (x - lse).exp() * g[0]).collect();
            accumulate(grads, *a, &d);
        }
        Op::Select(a, i) => {
            let mut d = vec![0.0; v(a).len()];
            d[*i] = g[0];
            accumulate(grads, *a, &d);
        }
        Op::BceWithLogits { logit, target } => {
            let z = v(logit).data()[0];
            accumulate(grads, *logit, &[(sigmoid(z) - target) * g[0]]);
        }
        Op::SmoothL1 { pred, target } => {
            let d: Vec<f64> = v(pred)
                .data()
                .iter()
                .zip(target)
                .map(|(p, t)| {
                    let diff = p - t;
                    let local = if diff.abs() < 1.0 { diff } else { diff.signum() };
                    local * g[0]
                })
                .collect();
            accumulate(grads, *pred, &d);
        }
        Op::WeightedSum(terms) => {
            for (t, w) in terms {
                let d: Vec<f64> = g.iter().map(|x| x * w).collect();
                accumulate(grads, *t, &d);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_zero_input_gives_bias_planes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 5, 5]));
        let k = g.input(t(&[3, 2, 3, 3], &[0.7; 54]));
        let b = g.input(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[3, 5, 5]);
        for (c, bias) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!(out.data()[c * 25..(c + 1) * 25].iter().all(|v| v == bias));
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut kernel = vec![0.0; 3 * 3];
        for c in 0..3 {
            kernel[c * 3 + c] = 1.0;
        }
        let input: Vec<f64> = (0..3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[3, 4, 4], &input));
        let k = g.input(t(&[3, 3, 1, 1], &kernel));
        let b = g.input(Tensor::zeros(&[3]));
        let y = g.conv2d(x, k, b, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), input.as_slice());
    }

    #[test]
    fn conv2d_hand_sum() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.input(t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 0, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv2d_output_size_with_stride_and_padding() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 7, 7]));
        let k = g.input(Tensor::zeros(&[2, 1, 3, 3]));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.conv2d(x, k, b, 1, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 4]);
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 4, 4]));
        let k = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.input(Tensor::zeros(&[1]));
        let err = g.conv2d(x, k, b, 0, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
        let k = g.input(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, k, b, 0, 1).is_err());
        let k = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, k, b, 0, 0).is_err());
    }

    #[test]
    fn fully_connected_cases() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 1.0]));
        let w = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.fully_connected(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let ident = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x2 = g.input(Tensor::vector(vec![-0.5, 2.5]));
        let y = g.fully_connected(x2, ident, b).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, 2.5]);

        let zero = g.input(Tensor::zeros(&[2, 2]));
        let bias = g.input(Tensor::vector(vec![0.25, -1.0]));
        let y = g.fully_connected(x2, zero, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.0]);

        let wide = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.fully_connected(x2, wide, b).is_err());
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = g.input(Tensor::vector(vec![-3.0, -0.1]));
        let r = g.relu(neg).unwrap();
        let ones = g.input(Tensor::vector(vec![1.0, 1.0]));
        let s = g.dot(r, ones).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(neg).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0]));
        let y = g.relu(x).unwrap();
        let s = g.select(y, 0).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);

        let unit = g.input(Tensor::vector(vec![0.6, 0.8]));
        let y = g.l2_normalize(unit).unwrap();
        assert!((g.value(y).data()[0] - 0.6).abs() < 1e-15);
        assert!((g.value(y).norm() - 1.0).abs() < 1e-12);

        let zero = g.input(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(g.l2_normalize(zero), Err(Error::ZeroNorm)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn bce_and_smooth_l1_values() {
        let mut g = Graph::new();
        let z = g.input(Tensor::scalar(0.0));
        let l = g.bce_with_logits(z, 1.0).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(smooth_l1(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]), 0.125);
        assert_eq!(smooth_l1(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4]), 1.5);
        assert_eq!(smooth_l1(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 0.0);
    }
}
