//! Forward and backward rules for every primitive.

use std::sync::Arc;

use super::{Result, Tensor, TensorError};

/// A differentiable primitive together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    // Broadcasting binary ops (numpy rules).
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
    Sigmoid,
    /// `log(sigmoid(x))`, computed without overflow.
    LogSigmoid,
    Log,
    Exp,
    Sin,
    Cos,
    Abs,
    Scale(f64),
    Shift(f64),
    /// `x^p` for a constant exponent `p >= 0`.
    PowScalar(f64),
    Softmax { axis: usize },
    /// Sum over one axis (removed from the shape) or over everything.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    /// Normalize over the last axis, no affine transform.
    LayerNorm { eps: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    /// Gather rows (axis 0). Repeated indices are allowed.
    IndexSelect { indices: Arc<Vec<usize>> },
    /// `[H, W, D]` map sampled at `[S, 2]` points given as `(x, y)` grid
    /// coordinates; taps outside the grid read zero.
    BilinearSample,
    /// `x * w + b` for `x: [M, K]`, `w: [K, N]`, `b: [N]`.
    Linear,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Maximum => "maximum",
            Primitive::Minimum => "minimum",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::LogSigmoid => "log_sigmoid",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Abs => "abs",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::PowScalar(_) => "pow_scalar",
            Primitive::Softmax { .. } => "softmax",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::IndexSelect { .. } => "index_select",
            Primitive::BilinearSample => "bilinear_sample",
            Primitive::Linear => "linear",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Maximum
            | Primitive::Minimum
            | Primitive::MatMul
            | Primitive::BilinearSample => Some(2),
            Primitive::Linear => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

pub(crate) struct Forward {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Per-kind cache for the backward rule (e.g. layer-norm inverse std).
    pub aux: Vec<f64>,
}

/// Input values saved on the tape for the backward pass.
pub(crate) struct SavedInput {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

fn shape_err(kind: &Primitive, inputs: &[&[usize]]) -> TensorError {
    TensorError::Shape { op: kind.name(), shapes: inputs.iter().map(|s| s.to_vec()).collect() }
}

pub(crate) fn forward(kind: &Primitive, inputs: &[&Tensor]) -> Result<Forward> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(TensorError::Invalid {
                op: kind.name(),
                reason: format!("expected {n} inputs, got {}", inputs.len()),
            });
        }
    } else if inputs.is_empty() {
        return Err(TensorError::Invalid { op: kind.name(), reason: "no inputs".into() });
    }
    let out = |shape: Vec<usize>, data: Vec<f64>| Ok(Forward { shape, data, aux: Vec::new() });
    match kind {
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::Div
        | Primitive::Maximum
        | Primitive::Minimum => binary_forward(kind, inputs[0], inputs[1]),
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(kind, &[a.shape(), b.shape()]));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), Layout::Row, b.data(), Layout::Row, &mut c);
            out(vec![m, n], c)
        }
        Primitive::Linear => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] || b.shape() != [w.shape()[1]] {
                return Err(shape_err(kind, &[x.shape(), w.shape(), b.shape()]));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let mut c = Vec::with_capacity(m * n);
            for _ in 0..m {
                c.extend_from_slice(b.data());
            }
            gemm_acc(m, k, n, x.data(), Layout::Row, w.data(), Layout::Row, &mut c);
            out(vec![m, n], c)
        }
        Primitive::Transpose => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(shape_err(kind, &[a.shape()]));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            out(vec![n, m], transpose(a.data(), m, n))
        }
        Primitive::Relu
        | Primitive::Gelu
        | Primitive::Tanh
        | Primitive::Sigmoid
        | Primitive::LogSigmoid
        | Primitive::Log
        | Primitive::Exp
        | Primitive::Sin
        | Primitive::Cos
        | Primitive::Abs
        | Primitive::Scale(_)
        | Primitive::Shift(_)
        | Primitive::PowScalar(_) => {
            let a = inputs[0];
            if let Primitive::PowScalar(p) = kind {
                if *p < 0.0 || !p.is_finite() {
                    return Err(TensorError::Invalid {
                        op: kind.name(),
                        reason: format!("exponent {p} must be finite and nonnegative"),
                    });
                }
            }
            let f = unary_fn(kind);
            out(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
        }
        Primitive::Softmax { axis } => {
            let a = inputs[0];
            let (outer, n, inner) = split_axis(kind, a.shape(), *axis)?;
            let mut y = a.to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| y[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..n {
                        let e = (y[idx(j)] - max).exp();
                        y[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..n {
                        y[idx(j)] /= total;
                    }
                }
            }
            out(a.shape().to_vec(), y)
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let a = inputs[0];
            let mean = matches!(kind, Primitive::Mean { .. });
            match axis {
                None => {
                    let s: f64 = a.data().iter().sum();
                    let n = a.numel().max(1) as f64;
                    out(Vec::new(), vec![if mean { s / n } else { s }])
                }
                Some(axis) => {
                    let (outer, n, inner) = split_axis(kind, a.shape(), *axis)?;
                    let mut y = vec![0.0; outer * inner];
                    let x = a.data();
                    for o in 0..outer {
                        for j in 0..n {
                            let row = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (acc, v) in y[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    if mean && n > 0 {
                        y.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    let mut shape = a.shape().to_vec();
                    shape.remove(*axis);
                    out(shape, y)
                }
            }
        }
        Primitive::LayerNorm { eps } => {
            let a = inputs[0];
            let d = *a.shape().last().ok_or_else(|| shape_err(kind, &[a.shape()]))?;
            if d == 0 {
                return Err(shape_err(kind, &[a.shape()]));
            }
            let rows = a.numel() / d;
            let mut y = vec![0.0; a.numel()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let x = &a.data()[r * d..(r + 1) * d];
                let mu = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for (o, v) in y[r * d..(r + 1) * d].iter_mut().zip(x) {
                    *o = (v - mu) * is;
                }
            }
            Ok(Forward { shape: a.shape().to_vec(), data: y, aux: inv_std })
        }
        Primitive::Concat { axis } => {
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(TensorError::Axis { op: kind.name(), axis: *axis, rank: first.len() });
            }
            let compatible = inputs.iter().all(|t| {
                t.rank() == first.len()
                    && t.shape().iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b)
            });
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
                return Err(shape_err(kind, &shapes));
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut y = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    y.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total_axis;
            out(shape, y)
        }
        Primitive::Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, n, inner) = split_axis(kind, a.shape(), *axis)?;
            if start + len > n {
                return Err(TensorError::Invalid {
                    op: kind.name(),
                    reason: format!("range {start}..{} exceeds axis length {n}", start + len),
                });
            }
            let mut y = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                y.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            out(shape, y)
        }
        Primitive::Reshape { shape } => {
            let a = inputs[0];
            if shape.iter().product::<usize>() != a.numel() {
                return Err(shape_err(kind, &[a.shape(), shape]));
            }
            out(shape.clone(), a.to_vec())
        }
        Primitive::IndexSelect { indices } => {
            let a = inputs[0];
            if a.rank() == 0 {
                return Err(shape_err(kind, &[a.shape()]));
            }
            let rows = a.shape()[0];
            let width: usize = a.shape()[1..].iter().product();
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(TensorError::Invalid {
                    op: kind.name(),
                    reason: format!("row index {bad} out of range for {rows} rows"),
                });
            }
            let mut y = Vec::with_capacity(indices.len() * width);
            for &i in indices.iter() {
                y.extend_from_slice(&a.data()[i * width..(i + 1) * width]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = indices.len();
            out(shape, y)
        }
        Primitive::BilinearSample => {
            let (map, pts) = (inputs[0], inputs[1]);
            if map.rank() != 3 || pts.rank() != 2 || pts.shape()[1] != 2 {
                return Err(shape_err(kind, &[map.shape(), pts.shape()]));
            }
            let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let s = pts.shape()[0];
            let mut y = vec![0.0; s * d];
            for p in 0..s {
                let taps = bilinear_taps(pts.data()[2 * p], pts.data()[2 * p + 1], h, w);
                let row = &mut y[p * d..(p + 1) * d];
                for tap in taps.iter().flatten() {
                    let cell = &map.data()[tap.offset * d..(tap.offset + 1) * d];
                    for (o, v) in row.iter_mut().zip(cell) {
                        *o += tap.weight * v;
                    }
                }
            }
            out(vec![s, d], y)
        }
    }
}

/// Gradients for each input; `None` where `needs[i]` is false.
pub(crate) fn backward(
    kind: &Primitive,
    inputs: &[SavedInput],
    out: &[f64],
    aux: &[f64],
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    match kind {
        Primitive::Add
        | Primitive::Sub
        | Primitive::Mul
        | Primitive::Div
        | Primitive::Maximum
        | Primitive::Minimum => binary_backward(kind, &inputs[0], &inputs[1], grad, need(0), need(1)),
        Primitive::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let ga = need(0).then(|| {
                // dA = dC * B^T
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, grad, Layout::Row, &b.data, Layout::Transposed { cols: n }, &mut g);
                g
            });
            let gb = need(1).then(|| {
                // dB = A^T * dC
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, &a.data, Layout::Transposed { cols: k }, grad, Layout::Row, &mut g);
                g
            });
            vec![ga, gb]
        }
        Primitive::Linear => {
            let (x, w) = (&inputs[0], &inputs[1]);
            let (m, k, n) = (x.shape[0], x.shape[1], w.shape[1]);
            let gx = need(0).then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, grad, Layout::Row, &w.data, Layout::Transposed { cols: n }, &mut g);
                g
            });
            let gw = need(1).then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, &x.data, Layout::Transposed { cols: k }, grad, Layout::Row, &mut g);
                g
            });
            let gb = need(2).then(|| {
                let mut g = vec![0.0; n];
                for row in grad.chunks_exact(n) {
                    g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                g
            });
            vec![gx, gw, gb]
        }
        Primitive::Transpose => {
            let (m, n) = (inputs[0].shape[0], inputs[0].shape[1]);
            vec![need(0).then(|| transpose(grad, n, m))]
        }
        Primitive::Relu
        | Primitive::Gelu
        | Primitive::Tanh
        | Primitive::Sigmoid
        | Primitive::LogSigmoid
        | Primitive::Log
        | Primitive::Exp
        | Primitive::Sin
        | Primitive::Cos
        | Primitive::Abs
        | Primitive::Scale(_)
        | Primitive::Shift(_)
        | Primitive::PowScalar(_) => {
            if !need(0) {
                return vec![None];
            }
            let x = &inputs[0].data;
            let g = x
                .iter()
                .zip(out)
                .zip(grad)
                .map(|((&x, &y), &g)| g * unary_derivative(kind, x, y))
                .collect();
            vec![Some(g)]
        }
        Primitive::Softmax { axis } => {
            if !need(0) {
                return vec![None];
            }
            let shape = &inputs[0].shape;
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| grad[idx(j)] * out[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = out[idx(j)] * (grad[idx(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            if !need(0) {
                return vec![None];
            }
            let shape = &inputs[0].shape;
            let numel: usize = shape.iter().product();
            let mean = matches!(kind, Primitive::Mean { .. });
            match axis {
                None => {
                    let scale = if mean { 1.0 / numel.max(1) as f64 } else { 1.0 };
                    vec![Some(vec![grad[0] * scale; numel])]
                }
                Some(axis) => {
                    let outer: usize = shape[..*axis].iter().product();
                    let n = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let scale = if mean { 1.0 / n.max(1) as f64 } else { 1.0 };
                    let mut gx = vec![0.0; numel];
                    for o in 0..outer {
                        let g = &grad[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for (dst, v) in gx[base..base + inner].iter_mut().zip(g) {
                                *dst = v * scale;
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            }
        }
        Primitive::LayerNorm { .. } => {
            if !need(0) {
                return vec![None];
            }
            let d = *inputs[0].shape.last().expect("layer_norm input has rank >= 1");
            let rows = out.len() / d;
            let mut gx = vec![0.0; out.len()];
            for r in 0..rows {
                let y = &out[r * d..(r + 1) * d];
                let g = &grad[r * d..(r + 1) * d];
                let mean_g = g.iter().sum::<f64>() / d as f64;
                let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((dst, &gv), &yv) in gx[r * d..(r + 1) * d].iter_mut().zip(g).zip(y) {
                    *dst = aux[r] * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(gx)]
        }
        Primitive::Concat { axis } => {
            let first = &inputs[0].shape;
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape[*axis]).sum();
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(idx, t)| {
                    let len = t.shape[*axis];
                    let start = offset;
                    offset += len;
                    need(idx).then(|| {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total_axis + start) * inner;
                            g.extend_from_slice(&grad[base..base + len * inner]);
                        }
                        g
                    })
                })
                .collect()
        }
        Primitive::Slice { axis, start, len } => {
            if !need(0) {
                return vec![None];
            }
            let shape = &inputs[0].shape;
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
            }
            vec![Some(gx)]
        }
        Primitive::Reshape { .. } => vec![need(0).then(|| grad.to_vec())],
        Primitive::IndexSelect { indices } => {
            if !need(0) {
                return vec![None];
            }
            let shape = &inputs[0].shape;
            let width: usize = shape[1..].iter().product();
            let mut gx = vec![0.0; shape[0] * width];
            for (row, &i) in indices.iter().enumerate() {
                for (dst, v) in gx[i * width..(i + 1) * width].iter_mut().zip(&grad[row * width..]) {
                    *dst += v;
                }
            }
            vec![Some(gx)]
        }
        Primitive::BilinearSample => {
            let (map, pts) = (&inputs[0], &inputs[1]);
            let (h, w, d) = (map.shape[0], map.shape[1], map.shape[2]);
            let s = pts.shape[0];
            let mut gmap = need(0).then(|| vec![0.0; h * w * d]);
            let mut gpts = need(1).then(|| vec![0.0; s * 2]);
            for p in 0..s {
                let (x, y) = (pts.data[2 * p], pts.data[2 * p + 1]);
                let taps = bilinear_taps(x, y, h, w);
                let g = &grad[p * d..(p + 1) * d];
                for tap in taps.iter().flatten() {
                    let cell = tap.offset * d..(tap.offset + 1) * d;
                    if let Some(gm) = gmap.as_mut() {
                        for (dst, v) in gm[cell.clone()].iter_mut().zip(g) {
                            *dst += tap.weight * v;
                        }
                    }
                    if let Some(gp) = gpts.as_mut() {
                        let dot: f64 = map.data[cell].iter().zip(g).map(|(a, b)| a * b).sum();
                        gp[2 * p] += tap.dw_dx * dot;
                        gp[2 * p + 1] += tap.dw_dy * dot;
                    }
                }
            }
            vec![gmap, gpts]
        }
    }
}

fn unary_fn(kind: &Primitive) -> impl Fn(f64) -> f64 {
    let kind = kind.clone();
    move |x: f64| match kind {
        Primitive::Relu => x.max(0.0),
        Primitive::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Primitive::Tanh => x.tanh(),
        Primitive::Sigmoid => sigmoid(x),
        Primitive::LogSigmoid => x.min(0.0) - (-x.abs()).exp().ln_1p(),
        Primitive::Log => x.ln(),
        Primitive::Exp => x.exp(),
        Primitive::Sin => x.sin(),
        Primitive::Cos => x.cos(),
        Primitive::Abs => x.abs(),
        Primitive::Scale(c) => c * x,
        Primitive::Shift(c) => x + c,
        Primitive::PowScalar(p) => {
            if p == 0.0 {
                1.0
            } else {
                x.powf(p)
            }
        }
        _ => unreachable!("not a unary primitive"),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn unary_derivative(kind: &Primitive, x: f64, y: f64) -> f64 {
    match *kind {
        Primitive::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Primitive::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Primitive::Tanh => 1.0 - y * y,
        Primitive::Sigmoid => y * (1.0 - y),
        Primitive::LogSigmoid => sigmoid(-x),
        Primitive::Log => 1.0 / x,
        Primitive::Exp => y,
        Primitive::Sin => x.cos(),
        Primitive::Cos => -x.sin(),
        Primitive::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Primitive::Scale(c) => c,
        Primitive::Shift(_) => 1.0,
        Primitive::PowScalar(p) => {
            if p == 0.0 || (x == 0.0 && p < 1.0) {
                0.0
            } else {
                p * x.powf(p - 1.0)
            }
        }
        _ => unreachable!("not a unary primitive"),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(kind: &Primitive, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis { op: kind.name(), axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let (inner, ja, jb) = (out[last], sa[last], sb[last]);
    let mut idx = vec![0usize; last];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * ja, ib + j * jb);
        }
        o += inner;
        for d in (0..last).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_op(kind: &Primitive) -> fn(f64, f64) -> f64 {
    match kind {
        Primitive::Add => |a, b| a + b,
        Primitive::Sub => |a, b| a - b,
        Primitive::Mul => |a, b| a * b,
        Primitive::Div => |a, b| a / b,
        Primitive::Maximum => f64::max,
        Primitive::Minimum => f64::min,
        _ => unreachable!("not a binary primitive"),
    }
}

/// Partial derivatives `(d/da, d/db)` of a binary op.
fn binary_partials(kind: &Primitive, a: f64, b: f64) -> (f64, f64) {
    match kind {
        Primitive::Add => (1.0, 1.0),
        Primitive::Sub => (1.0, -1.0),
        Primitive::Mul => (b, a),
        Primitive::Div => (1.0 / b, -a / (b * b)),
        Primitive::Maximum => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        Primitive::Minimum => {
            if a <= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
        _ => unreachable!("not a binary primitive"),
    }
}

fn binary_forward(kind: &Primitive, a: &Tensor, b: &Tensor) -> Result<Forward> {
    match kind {
        Primitive::Add => binary_forward_with(kind, |x, y| x + y, a, b),
        Primitive::Sub => binary_forward_with(kind, |x, y| x - y, a, b),
        Primitive::Mul => binary_forward_with(kind, |x, y| x * y, a, b),
        _ => binary_forward_with(kind, binary_op(kind), a, b),
    }
}

fn binary_forward_with(kind: &Primitive, op: impl Fn(f64, f64) -> f64, a: &Tensor, b: &Tensor) -> Result<Forward> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| op(x, y)).collect();
        return Ok(Forward { shape: a.shape().to_vec(), data, aux: Vec::new() });
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(kind, &[a.shape(), b.shape()]))?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut data = vec![0.0; shape.iter().product()];
    let (xa, xb) = (a.data(), b.data());
    for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = op(xa[ia], xb[ib]));
    Ok(Forward { shape, data, aux: Vec::new() })
}

fn binary_backward(
    kind: &Primitive,
    a: &SavedInput,
    b: &SavedInput,
    grad: &[f64],
    need_a: bool,
    need_b: bool,
) -> Vec<Option<Vec<f64>>> {
    // monomorphize the inner loop per op
    match kind {
        Primitive::Add => binary_backward_with(|_, _| (1.0, 1.0), a, b, grad, need_a, need_b),
        Primitive::Sub => binary_backward_with(|_, _| (1.0, -1.0), a, b, grad, need_a, need_b),
        Primitive::Mul => binary_backward_with(|x, y| (y, x), a, b, grad, need_a, need_b),
        _ => binary_backward_with(|x, y| binary_partials(kind, x, y), a, b, grad, need_a, need_b),
    }
}

fn binary_backward_with(
    partials: impl Fn(f64, f64) -> (f64, f64),
    a: &SavedInput,
    b: &SavedInput,
    grad: &[f64],
    need_a: bool,
    need_b: bool,
) -> Vec<Option<Vec<f64>>> {
    let mut ga = need_a.then(|| vec![0.0; a.data.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.data.len()]);
    let mut visit = |o: usize, ia: usize, ib: usize| {
        let (da, db) = partials(a.data[ia], b.data[ib]);
        if let Some(ga) = ga.as_mut() {
            ga[ia] += grad[o] * da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += grad[o] * db;
        }
    };
    if a.shape == b.shape {
        for o in 0..grad.len() {
            visit(o, o, o);
        }
    } else {
        let shape = broadcast_shape(&a.shape, &b.shape).expect("shapes validated in forward");
        let sa = broadcast_strides(&a.shape, &shape);
        let sb = broadcast_strides(&b.shape, &shape);
        for_each_broadcast(&shape, &sa, &sb, visit);
    }
    vec![ga, gb]
}

fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            y[j * m + i] = x[i * n + j];
        }
    }
    y
}

/// Memory layout of a matmul operand.
#[derive(Clone, Copy)]
enum Layout {
    /// Row-major as stored.
    Row,
    /// The operand is the transpose of a row-major buffer with `cols` columns.
    Transposed { cols: usize },
}

/// `c = a * b` where `a` is `m x k` and `b` is `k x n` after applying layouts.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    gemm_beta(m, k, n, a, la, b, lb, 0.0, c)
}

/// `c += a * b`.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    gemm_beta(m, k, n, a, la, b, lb, 1.0, c)
}

#[allow(clippy::too_many_arguments)]
fn gemm_beta(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = match la {
        Layout::Row => (k as isize, 1),
        Layout::Transposed { cols, .. } => (1, cols as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Row => (n as isize, 1),
        Layout::Transposed { cols, .. } => (1, cols as isize),
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides describe in-bounds row-major or transposed views of them.
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

#[derive(Clone, Copy)]
struct Tap {
    offset: usize,
    weight: f64,
    dw_dx: f64,
    dw_dy: f64,
}

/// The four bilinear taps around `(x, y)`; out-of-grid taps are `None`.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Option<Tap>; 4] {
    if !x.is_finite() || !y.is_finite() {
        return [None; 4];
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let corners = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1.0, 1.0, fx * fy, fy, fx),
    ];
    corners.map(|(dx, dy, weight, dw_dx, dw_dy)| {
        let (cx, cy) = (x0 + dx, y0 + dy);
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            return None;
        }
        Some(Tap { offset: cy as usize * w + cx as usize, weight, dw_dx, dw_dy })
    })
}
