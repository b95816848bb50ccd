//! Differentiable operations. Each op computes its forward value eagerly and
//! records an [`Op`] carrying whatever the backward rule needs.

use std::sync::Arc;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tape::{Node, Var};
use super::{conv_output_size, strides, Result, Tensor, TensorError};

const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Hardswish,
    Sigmoid,
    Gelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Hardswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the value folded into running statistics.
    pub var: Vec<f64>,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        pairs: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        out_c: usize,
    },
    Upsample {
        x: usize,
        fh: usize,
        fw: usize,
    },
    AvgPool {
        x: usize,
        factor: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Activation {
        x: usize,
        kind: Activation,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        index: Vec<usize>,
    },
    Bce {
        p: usize,
        target: Arc<Tensor>,
    },
    SoftDice {
        p: usize,
        target: Arc<Tensor>,
        smooth: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Softmax { .. } => "softmax",
            Op::Activation { .. } => "activation",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::IndexSelect { .. } => "index_select",
            Op::Bce { .. } => "binary_cross_entropy",
            Op::SoftDice { .. } => "soft_dice_loss",
        }
    }

    pub fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Upsample { x, .. }
            | Op::AvgPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Softmax { x, .. }
            | Op::Activation { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::IndexSelect { x, .. } => vec![*x],
            Op::Bce { p, .. } | Op::SoftDice { p, .. } => vec![*p],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| -> &Tensor { &nodes[id].value };
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, pairs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                accumulate(nodes, grads, *a, |ga| {
                    for (bi, &(ao, bo)) in pairs.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            gc,
                            (n, 1),
                            &bv.data()[bo * k * n..],
                            (1, n),
                            1.0,
                            &mut ga[ao * m * k..],
                            (k, 1),
                        );
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for (bi, &(ao, bo)) in pairs.iter().enumerate() {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &av.data()[ao * m * k..],
                            (1, k),
                            gc,
                            (n, 1),
                            1.0,
                            &mut gb[bo * k * n..],
                            (n, 1),
                        );
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                out_c,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let rows = geom.col_rows();
                let cols = geom.col_cols();
                let img = geom.channels * geom.height * geom.width;
                let out_sz = out_c * cols;
                let mut col = vec![0.0; rows * cols];
                accumulate(nodes, grads, *w, |gw| {
                    for bi in 0..*batch {
                        im2col(&xv.data()[bi * img..(bi + 1) * img], geom, &mut col);
                        let go = &g[bi * out_sz..(bi + 1) * out_sz];
                        // dW += dOut · colᵀ
                        gemm(
                            *out_c,
                            cols,
                            rows,
                            1.0,
                            go,
                            (cols, 1),
                            &col,
                            (1, cols),
                            1.0,
                            gw,
                            (rows, 1),
                        );
                    }
                });
                accumulate(nodes, grads, *x, |gx| {
                    for bi in 0..*batch {
                        let go = &g[bi * out_sz..(bi + 1) * out_sz];
                        // dcol = Wᵀ · dOut
                        gemm(
                            rows,
                            *out_c,
                            cols,
                            1.0,
                            wv.data(),
                            (1, rows),
                            go,
                            (cols, 1),
                            0.0,
                            &mut col,
                            (cols, 1),
                        );
                        col2im(&col, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                });
                if let Some(bias) = bias {
                    accumulate(nodes, grads, *bias, |gb| {
                        for bi in 0..*batch {
                            for (c, acc) in gb.iter_mut().enumerate() {
                                let s = bi * out_sz + c * cols;
                                *acc += g[s..s + cols].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Upsample { x, fh, fw } => {
                let xs = val(*x).shape().to_vec();
                let (fh, fw) = (*fh, *fw);
                let (h, w) = (xs[2], xs[3]);
                accumulate(nodes, grads, *x, |gx| {
                    let ow = w * fw;
                    for plane in 0..xs[0] * xs[1] {
                        let go = &g[plane * h * w * fh * fw..];
                        let gi = &mut gx[plane * h * w..];
                        for oy in 0..h * fh {
                            for ox in 0..ow {
                                gi[(oy / fh) * w + ox / fw] += go[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, factor } => {
                let xs = val(*x).shape().to_vec();
                let f = *factor;
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / f, w / f);
                let scale = 1.0 / (f * f) as f64;
                accumulate(nodes, grads, *x, |gx| {
                    for plane in 0..xs[0] * xs[1] {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[plane * h * w + y * w + xx] += g[plane * oh * ow + (y / f) * ow + xx / f] * scale;
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                accumulate(nodes, grads, *x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, c, inner) = split_axis(val(*x).shape(), *axis);
                let gam = val(*gamma).data();
                let count = (outer * inner) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                accumulate(nodes, grads, *gamma, |gg| {
                    for ch in 0..c {
                        gg[ch] += sum_dy_xhat[ch];
                    }
                });
                accumulate(nodes, grads, *beta, |gb| {
                    for ch in 0..c {
                        gb[ch] += sum_dy[ch];
                    }
                });
                accumulate(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + inner {
                                gx[i] += if *train {
                                    k * (g[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                accumulate(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Activation { x, kind } => {
                let xv = val(*x).data();
                let y = out.data();
                accumulate(nodes, grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kind.derivative(xv[i], y[i]);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &xi in xs {
                    let chunk = val(xi).shape()[*axis] * inner;
                    accumulate(nodes, grads, xi, |gx| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, s) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Add { a, b } => {
                accumulate(nodes, grads, *a, |ga| add_into(ga, g));
                accumulate(nodes, grads, *b, |gb| {
                    for chunk in g.chunks(gb.len()) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Sub { a, b } => {
                accumulate(nodes, grads, *a, |ga| add_into(ga, g));
                accumulate(nodes, grads, *b, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                accumulate(nodes, grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                accumulate(nodes, grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, factor } => {
                accumulate(nodes, grads, *x, |gx| {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            }
            Op::Sum { x } => {
                accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean { x } => {
                accumulate(nodes, grads, *x, |gx| {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                });
            }
            Op::Permute { x, perm } => {
                let src_shape = val(*x).shape().to_vec();
                let map = permute_map(&src_shape, perm);
                accumulate(nodes, grads, *x, |gx| {
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::IndexSelect { x, axis, index } => {
                let xs = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&xs, *axis);
                let m = index.len();
                accumulate(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        for (j, &src) in index.iter().enumerate() {
                            let d = (o * n + src) * inner;
                            let s = (o * m + j) * inner;
                            add_into(&mut gx[d..d + inner], &g[s..s + inner]);
                        }
                    }
                });
            }
            Op::Bce { p, target } => {
                let pv = val(*p).data();
                let t = target.data();
                let scale = g[0] / pv.len() as f64;
                accumulate(nodes, grads, *p, |gp| {
                    for i in 0..gp.len() {
                        let pi = pv[i];
                        if pi <= BCE_CLAMP || pi >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        gp[i] += scale * (pi - t[i]) / (pi * (1.0 - pi));
                    }
                });
            }
            Op::SoftDice { p, target, smooth } => {
                let pv = val(*p);
                let (outer, c, inner) = split_axis(pv.shape(), 1);
                let sums = dice_sums(pv.data(), target.data(), outer, c, inner);
                let t = target.data();
                accumulate(nodes, grads, *p, |gp| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let (inter, ps, ts) = sums[ch];
                            let num = 2.0 * inter + smooth;
                            let den = ps + ts + smooth;
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                let dscore = (2.0 * t[i] * den - num) / (den * den);
                                gp[i] -= g[0] * dscore / c as f64;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let buf = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(buf)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Views a shape as `[outer, shape[axis], inner]`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source flat index for every output position of a permutation.
fn permute_map(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            src += step[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    map
}

/// Per-class (intersection, prob sum, target sum) pooled over batch and space.
fn dice_sums(p: &[f64], t: &[f64], outer: usize, c: usize, inner: usize) -> Vec<(f64, f64, f64)> {
    let mut sums = vec![(0.0, 0.0, 0.0); c];
    for o in 0..outer {
        for (ch, s) in sums.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                s.0 += p[i] * t[i];
                s.1 += p[i];
                s.2 += t[i];
            }
        }
    }
    sums
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn require_4d(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(invalid(op, shape, "expected [batch, channels, height, width]"));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let nd = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(nd);
        for d in 0..nd {
            if pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1 {
                return Err(shape_err("matmul", sa, sb));
            }
            batch.push(pa[d].max(pb[d]));
        }
        let total: usize = batch.iter().product();
        let (stra, strb) = (strides(&pa), strides(&pb));
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        for _ in 0..total {
            let mut ao = 0;
            let mut bo = 0;
            for d in 0..nd {
                if pa[d] > 1 {
                    ao += idx[d] * stra[d];
                }
                if pb[d] > 1 {
                    bo += idx[d] * strb[d];
                }
            }
            pairs.push((ao, bo));
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = vec![0.0; total * m * n];
        for (bi, &(ao, bo)) in pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[ao * m * k..],
                (k, 1),
                &bv.data()[bo * k * n..],
                (n, 1),
                0.0,
                &mut out[bi * m * n..],
                (n, 1),
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                pairs,
                m,
                k,
                n,
            },
        ))
    }

    /// 2-D cross-correlation. `self` is `[B, Cin, H, W]`, `weight` is
    /// `[Cout, Cin, kh, kw]`, `bias` is `[Cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (xv, wv) = (self.value(), weight.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        require_4d("conv2d", xs)?;
        if ws.len() != 4 || ws[1] != xs[1] {
            return Err(shape_err("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        if ws[2] > xs[2] + 2 * padding || ws[3] > xs[3] + 2 * padding {
            return Err(invalid(
                "conv2d",
                xs,
                format!("kernel {:?} larger than padded input", &ws[2..]),
            ));
        }
        let bias_v = match bias {
            Some(b) => {
                self.same_tape(&b);
                let bv = b.value();
                if bv.shape() != [ws[0]] {
                    return Err(shape_err("conv2d bias", bv.shape(), &ws[..1]));
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
            out_h: conv_output_size(xs[2], ws[2], stride, padding),
            out_w: conv_output_size(xs[3], ws[3], stride, padding),
        };
        let (batch, out_c) = (xs[0], ws[0]);
        let rows = geom.col_rows();
        let cols = geom.col_cols();
        let img = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; batch * out_c * cols];
        let mut col = vec![0.0; rows * cols];
        for bi in 0..batch {
            let dst = &mut out[bi * out_c * cols..(bi + 1) * out_c * cols];
            if let Some(bv) = &bias_v {
                for (c, &b) in bv.data().iter().enumerate() {
                    dst[c * cols..(c + 1) * cols].fill(b);
                }
            }
            // 1x1 unit-stride: the patch matrix is the image itself
            if geom.kernel_h == 1 && geom.kernel_w == 1 && stride == 1 && padding == 0 {
                gemm(
                    out_c,
                    rows,
                    cols,
                    1.0,
                    wv.data(),
                    (rows, 1),
                    &xv.data()[bi * img..],
                    (cols, 1),
                    1.0,
                    dst,
                    (cols, 1),
                );
            } else {
                im2col(&xv.data()[bi * img..(bi + 1) * img], &geom, &mut col);
                gemm(
                    out_c,
                    rows,
                    cols,
                    1.0,
                    wv.data(),
                    (rows, 1),
                    &col,
                    (cols, 1),
                    1.0,
                    dst,
                    (cols, 1),
                );
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[batch, out_c, geom.out_h, geom.out_w], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                geom,
                batch,
                out_c,
            },
        ))
    }

    /// Nearest-neighbour upsampling of the two trailing axes of `[B, C, H, W]`.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        self.upsample_nearest_hw(factor, factor)
    }

    /// Nearest-neighbour upsampling with separate row and column factors.
    pub fn upsample_nearest_hw(self, fh: usize, fw: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        require_4d("upsample_nearest", xs)?;
        if fh == 0 || fw == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                reason: "factor must be positive".into(),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h * fh, w * fw);
        let mut out = vec![0.0; xs[0] * xs[1] * oh * ow];
        for plane in 0..xs[0] * xs[1] {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / fh) * w + ox / fw];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[xs[0], xs[1], oh, ow], out)?,
            Op::Upsample { x: self.id, fh, fw },
        ))
    }

    /// Mean over non-overlapping `factor`×`factor` windows.
    pub fn avg_pool2d(self, factor: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        require_4d("avg_pool2d", xs)?;
        if factor == 0 || !xs[2].is_multiple_of(factor) || !xs[3].is_multiple_of(factor) {
            return Err(invalid(
                "avg_pool2d",
                xs,
                format!("spatial dims must be divisible by {factor}"),
            ));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / factor, w / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; xs[0] * xs[1] * oh * ow];
        for plane in 0..xs[0] * xs[1] {
            for y in 0..h {
                for x in 0..w {
                    out[plane * oh * ow + (y / factor) * ow + x / factor] +=
                        xv.data()[plane * h * w + y * w + x] * scale;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[xs[0], xs[1], oh, ow], out)?,
            Op::AvgPool { x: self.id, factor },
        ))
    }

    /// 2×2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn max_pool2d(self) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        require_4d("max_pool2d", xs)?;
        let (h, w) = (xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(invalid("max_pool2d", xs, "spatial dims must be at least 2"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let n = xs[0] * xs[1] * oh * ow;
        let mut out = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let d = xv.data();
        for plane in 0..xs[0] * xs[1] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[xs[0], xs[1], oh, ow], out)?,
            Op::MaxPool { x: self.id, argmax },
        ))
    }

    /// Batch normalization with batch statistics over every axis except
    /// `axis`. Returns the per-channel mean and unbiased variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        axis: usize,
        eps: f64,
    ) -> Result<(Var<'t>, BatchStats)> {
        let xv = self.value();
        let (outer, c, inner) = self.check_norm(&gamma, &beta, axis)?;
        let count = outer * inner;
        let d = xv.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += d[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += d[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / count as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased = if count > 1 {
            var.iter().map(|v| v / (count - 1) as f64).collect()
        } else {
            biased.clone()
        };
        let out = self.normalize(&gamma, &beta, axis, &mean, &inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        axis: usize,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var<'t>> {
        let (_, c, _) = self.check_norm(&gamma, &beta, axis)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm running stats", &[mean.len(), var.len()], &[c]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(&gamma, &beta, axis, mean, &inv_std, false)
    }

    fn check_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, axis: usize) -> Result<(usize, usize, usize)> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let xs = self.shape();
        if axis >= xs.len() {
            return Err(invalid("batch_norm", &xs, format!("axis {axis} out of range")));
        }
        let (outer, c, inner) = split_axis(&xs, axis);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err("batch_norm", &xs, &gamma.shape()));
        }
        if outer * inner == 0 {
            return Err(invalid("batch_norm", &xs, "empty batch"));
        }
        Ok((outer, c, inner))
    }

    fn normalize(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        axis: usize,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<Var<'t>> {
        let xv = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let (outer, c, inner) = split_axis(xv.shape(), axis);
        let d = xv.data();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(xv.shape(), out)?,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                axis,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        if axis >= xs.len() {
            return Err(invalid("softmax", xs, format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(xs, axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.tape.push(Tensor::new(xs, out)?, Op::Softmax { x: self.id, axis }))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let xv = self.value();
        let out: Vec<f64> = xv.data().iter().map(|&v| kind.apply(v)).collect();
        self.tape.push(
            Tensor::new(xv.shape(), out).expect("elementwise keeps shape"),
            Op::Activation { x: self.id, kind },
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn hardswish(self) -> Var<'t> {
        self.activation(Activation::Hardswish)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activation(Activation::Sigmoid)
    }

    pub fn gelu(self) -> Var<'t> {
        self.activation(Activation::Gelu)
    }

    /// Concatenates along `axis`; every other axis must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let values: Vec<Arc<Tensor>> = parts
            .iter()
            .map(|p| {
                first.same_tape(p);
                p.value()
            })
            .collect();
        let s0 = values[0].shape();
        if axis >= s0.len() {
            return Err(invalid("concat", s0, format!("axis {axis} out of range")));
        }
        let mut shape = s0.to_vec();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != s0.len() || (0..s.len()).any(|d| d != axis && s[d] != s0[d]) {
                return Err(shape_err("concat", s0, s));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(first.tape.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                xs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `ops::Add`
    /// Elementwise sum. `other` may also match a trailing suffix of `self`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(bv.numel()) {
            add_into(chunk, bv.data());
        }
        Ok(self.tape.push(
            Tensor::new(sa, out)?,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `ops::Sub`
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(a, b)| a - b).collect();
        Ok(self.tape.push(
            Tensor::new(av.shape(), out)?,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        ))
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `ops::Mul`
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (av, bv) = (self.value(), other.value());
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(a, b)| a * b).collect();
        Ok(self.tape.push(
            Tensor::new(av.shape(), out)?,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let xv = self.value();
        let out = xv.data().iter().map(|v| v * factor).collect();
        self.tape.push(
            Tensor::new(xv.shape(), out).expect("elementwise keeps shape"),
            Op::Scale { x: self.id, factor },
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let xv = self.value();
        let out = xv.data().iter().map(|v| v + c).collect();
        self.tape.push(
            Tensor::new(xv.shape(), out).expect("elementwise keeps shape"),
            Op::AddScalar { x: self.id },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'t> {
        let xv = self.value();
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean { x: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape { x: self.id }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len()
            || perm
                .iter()
                .any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid("permute", xs, format!("{perm:?} is not a permutation")));
        }
        let map = permute_map(xs, perm);
        let out = map.iter().map(|&i| xv.data()[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Gathers entries `index` along `axis` (duplicates allowed).
    pub fn index_select(self, axis: usize, index: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let xs = xv.shape();
        if axis >= xs.len() || index.is_empty() || index.iter().any(|&i| i >= xs[axis]) {
            return Err(invalid("index_select", xs, format!("bad index along axis {axis}")));
        }
        let (outer, n, inner) = split_axis(xs, axis);
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &src in index {
                let s = (o * n + src) * inner;
                out.extend_from_slice(&xv.data()[s..s + inner]);
            }
        }
        let mut shape = xs.to_vec();
        shape[axis] = index.len();
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::IndexSelect {
                x: self.id,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against a fixed target.
    pub fn binary_cross_entropy(self, target: Arc<Tensor>) -> Result<Var<'t>> {
        let pv = self.value();
        if pv.shape() != target.shape() {
            return Err(shape_err("binary_cross_entropy", pv.shape(), target.shape()));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.tape.push(
            Tensor::scalar(total / pv.numel() as f64),
            Op::Bce { p: self.id, target },
        ))
    }

    /// `1 − (2·Σpt + s)/(Σp + Σt + s)` per class (axis 1), sums pooled over
    /// the batch and spatial axes, averaged over classes.
    pub fn soft_dice_loss(self, target: Arc<Tensor>, smooth: f64) -> Result<Var<'t>> {
        let pv = self.value();
        if pv.shape() != target.shape() {
            return Err(shape_err("soft_dice_loss", pv.shape(), target.shape()));
        }
        if pv.ndim() < 2 {
            return Err(invalid("soft_dice_loss", pv.shape(), "expected [batch, classes, ...]"));
        }
        let (outer, c, inner) = split_axis(pv.shape(), 1);
        let sums = dice_sums(pv.data(), target.data(), outer, c, inner);
        let loss = sums
            .iter()
            .map(|&(i, p, t)| 1.0 - (2.0 * i + smooth) / (p + t + smooth))
            .sum::<f64>()
            / c as f64;
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                p: self.id,
                target,
                smooth,
            },
        ))
    }
}
