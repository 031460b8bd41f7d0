//! Forward and backward kernels for the primitive set.
//!
//! Conventions that matter for gradients:
//! - `abs` uses sign(0) = 0.
//! - `relu` and `clamp` propagate zero gradient at their kink points.
//! - reductions (`sum`, `mean`) collapse to a `[1]` scalar.
//! - `softmax` acts over the last axis.
//! - `conv2d` is stride 1 with zero padding that preserves spatial size.

use super::Tensor;
use crate::error::{Error, Result};

/// A primitive operation. Everything differentiable in this crate is a
/// composition of these.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Elementwise sum; also accepts a rank-1 rhs broadcast over the last
    /// axis (bias addition).
    Add,
    Sub,
    Mul,
    /// Rank-2 matrix product `[m,k] x [k,n]`.
    Matmul,
    /// `x [B,C,H,W]`, `w [O,C,kh,kw]`, `b [O]`; odd kernel, stride 1,
    /// zero-padded to keep `H x W`.
    Conv2d,
    Relu,
    LeakyRelu { slope: f32 },
    Abs,
    /// Natural log; the caller keeps inputs positive (clamp first).
    Log,
    Clamp { lo: f32, hi: f32 },
    /// Full reduction to a `[1]` scalar.
    Mean,
    Sum,
    Reshape { shape: Vec<usize> },
    /// Zero padding, per-axis `(before, after)`.
    Pad { before: Vec<usize>, after: Vec<usize> },
    /// Rectangular crop, per-axis `(start, len)`.
    Slice { start: Vec<usize>, len: Vec<usize> },
    /// Softmax over the last axis.
    Softmax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Conv2d => "conv2d",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Abs => "abs",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Pad { .. } => "pad",
            Op::Slice { .. } => "slice",
            Op::Softmax => "softmax",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Matmul => 2,
            Op::Conv2d => 3,
            _ => 1,
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn want_arity(op: &Op, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != op.arity() {
        return Err(Error::shape(
            op.name(),
            format!("expected {} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    Ok(())
}

/// True when `b` may be broadcast over the last axis of `a`.
fn bias_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() == 1 && !a.is_empty() && *a.last().unwrap() == b[0] && a.len() > 1
}

pub(super) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    want_arity(op, inputs)?;
    let out = match op {
        Op::Add => add_like(inputs[0], inputs[1], op.name(), |a, b| a + b)?,
        Op::Sub => add_like(inputs[0], inputs[1], op.name(), |a, b| a - b)?,
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "mul",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::new(a.shape(), data)?
        }
        Op::Matmul => matmul_fwd(inputs[0], inputs[1])?,
        Op::Conv2d => conv2d_fwd(inputs[0], inputs[1], inputs[2])?,
        Op::Relu => map(inputs[0], |v| v.max(0.0)),
        Op::LeakyRelu { slope } => {
            let s = *slope;
            map(inputs[0], move |v| if v > 0.0 { v } else { s * v })
        }
        Op::Abs => map(inputs[0], |v| v.abs()),
        Op::Log => map(inputs[0], |v| v.ln()),
        Op::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::arg(format!("clamp bounds inverted: {lo} > {hi}")));
            }
            let (lo, hi) = (*lo, *hi);
            map(inputs[0], move |v| v.clamp(lo, hi))
        }
        Op::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f32>() / x.numel() as f32)
        }
        Op::Sum => Tensor::scalar(inputs[0].data().iter().sum::<f32>()),
        Op::Reshape { shape } => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} -> {:?}", x.shape(), shape),
                ));
            }
            Tensor::new(shape, x.data().to_vec())?
        }
        Op::Pad { before, after } => pad_fwd(inputs[0], before, after)?,
        Op::Slice { start, len } => slice_fwd(inputs[0], start, len)?,
        Op::Softmax => softmax_fwd(inputs[0])?,
    };
    out.check_finite(op.name())?;
    Ok(out)
}

/// Accumulates input gradients for `op`. `sinks[i]` is the gradient buffer of
/// input `i`, or `None` when that input is not tracked.
pub(super) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &[f32],
    sinks: &mut [Option<&mut Vec<f32>>],
) {
    match op {
        Op::Add => {
            if let Some(g) = sinks[0].as_deref_mut() {
                axpy(g, gout, 1.0);
            }
            if let Some(g) = sinks[1].as_deref_mut() {
                if bias_broadcast(inputs[0].shape(), inputs[1].shape()) {
                    let n = inputs[1].numel();
                    for (i, v) in gout.iter().enumerate() {
                        g[i % n] += v;
                    }
                } else {
                    axpy(g, gout, 1.0);
                }
            }
        }
        Op::Sub => {
            if let Some(g) = sinks[0].as_deref_mut() {
                axpy(g, gout, 1.0);
            }
            if let Some(g) = sinks[1].as_deref_mut() {
                if bias_broadcast(inputs[0].shape(), inputs[1].shape()) {
                    let n = inputs[1].numel();
                    for (i, v) in gout.iter().enumerate() {
                        g[i % n] -= v;
                    }
                } else {
                    axpy(g, gout, -1.0);
                }
            }
        }
        Op::Mul => {
            if let Some(g) = sinks[0].as_deref_mut() {
                for ((g, go), b) in g.iter_mut().zip(gout).zip(inputs[1].data()) {
                    *g += go * b;
                }
            }
            if let Some(g) = sinks[1].as_deref_mut() {
                for ((g, go), a) in g.iter_mut().zip(gout).zip(inputs[0].data()) {
                    *g += go * a;
                }
            }
        }
        Op::Matmul => matmul_bwd(inputs, gout, sinks),
        Op::Conv2d => conv2d_bwd(inputs, gout, sinks),
        Op::Relu => map_bwd(inputs[0], gout, sinks, |v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::LeakyRelu { slope } => {
            let s = *slope;
            map_bwd(inputs[0], gout, sinks, move |v| if v > 0.0 { 1.0 } else { s })
        }
        Op::Abs => map_bwd(inputs[0], gout, sinks, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Log => map_bwd(inputs[0], gout, sinks, |v| 1.0 / v),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            map_bwd(inputs[0], gout, sinks, move |v| {
                if v >= lo && v <= hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::Mean => {
            if let Some(g) = sinks[0].as_deref_mut() {
                let s = gout[0] / inputs[0].numel() as f32;
                for v in g.iter_mut() {
                    *v += s;
                }
            }
        }
        Op::Sum => {
            if let Some(g) = sinks[0].as_deref_mut() {
                for v in g.iter_mut() {
                    *v += gout[0];
                }
            }
        }
        Op::Reshape { .. } => {
            if let Some(g) = sinks[0].as_deref_mut() {
                axpy(g, gout, 1.0);
            }
        }
        Op::Pad { before, after } => {
            if let Some(g) = sinks[0].as_deref_mut() {
                pad_bwd(inputs[0].shape(), before, after, gout, g);
            }
        }
        Op::Slice { start, len } => {
            if let Some(g) = sinks[0].as_deref_mut() {
                slice_bwd(inputs[0].shape(), start, len, gout, g);
            }
        }
        Op::Softmax => {
            if let Some(g) = sinks[0].as_deref_mut() {
                softmax_bwd(output, gout, g);
            }
        }
    }
}

fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
        requires_grad: false,
        grad: None,
    }
}

fn map_bwd(
    x: &Tensor,
    gout: &[f32],
    sinks: &mut [Option<&mut Vec<f32>>],
    df: impl Fn(f32) -> f32,
) {
    if let Some(g) = sinks[0].as_deref_mut() {
        for ((g, go), &v) in g.iter_mut().zip(gout).zip(x.data()) {
            *g += go * df(v);
        }
    }
}

fn add_like(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        return Tensor::new(a.shape(), data);
    }
    if bias_broadcast(a.shape(), b.shape()) {
        let n = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, b.data()[i % n]))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
}

// ---------------------------------------------------------------- matmul --

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", sa, sb),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new(&[m, n], out)
}

fn matmul_bwd(inputs: &[&Tensor], gout: &[f32], sinks: &mut [Option<&mut Vec<f32>>]) {
    let (a, b) = (inputs[0], inputs[1]);
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if let Some(ga) = sinks[0].as_deref_mut() {
        // dA = dC * B^T
        for i in 0..m {
            let grow = &gout[i * n..(i + 1) * n];
            let garow = &mut ga[i * k..(i + 1) * k];
            for p in 0..k {
                let brow = &b.data()[p * n..(p + 1) * n];
                let mut acc = 0.0;
                for (g, bv) in grow.iter().zip(brow) {
                    acc += g * bv;
                }
                garow[p] += acc;
            }
        }
    }
    if let Some(gb) = sinks[1].as_deref_mut() {
        // dB = A^T * dC
        for i in 0..m {
            let arow = &a.data()[i * k..(i + 1) * k];
            let grow = &gout[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let gbrow = &mut gb[p * n..(p + 1) * n];
                    for (gb, g) in gbrow.iter_mut().zip(grow) {
                        *gb += av * g;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- conv2d --

fn conv2d_check(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
    if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
        ));
    }
    let (bs, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (co, ciw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    if ci != ciw || sb[0] != co {
        return Err(Error::shape(
            "conv2d",
            format!("channel mismatch: x {:?}, w {:?}, b {:?}", sx, sw, sb),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::arg(format!(
            "conv2d kernel extents must be odd, got {}x{}",
            kh, kw
        )));
    }
    Ok((bs, ci, h, wd, co, kh, kw))
}

fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, ci, h, wd, co, kh, kw) = conv2d_check(x, w, b)?;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0f32; bs * co * h * wd];
    let xd = x.data();
    let wd_ = w.data();
    for n in 0..bs {
        for o in 0..co {
            let oplane = &mut out[(n * co + o) * h * wd..(n * co + o + 1) * h * wd];
            oplane.fill(b.data()[o]);
            for c in 0..ci {
                let xplane = &xd[(n * ci + c) * h * wd..(n * ci + c + 1) * h * wd];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wv = wd_[((o * ci + c) * kh + dy) * kw + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        // y + dy - ph must land in [0, h)
                        let y0 = ph.saturating_sub(dy);
                        let y1 = (h + ph).saturating_sub(dy).min(h);
                        let x0 = pw.saturating_sub(dx);
                        let x1 = (wd + pw).saturating_sub(dx).min(wd);
                        for y in y0..y1 {
                            let sy = y + dy - ph;
                            let orow = &mut oplane[y * wd + x0..y * wd + x1];
                            let xrow = &xplane[sy * wd + (x0 + dx - pw)..sy * wd + (x1 + dx - pw)];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[bs, co, h, wd], out)
}

fn conv2d_bwd(inputs: &[&Tensor], gout: &[f32], sinks: &mut [Option<&mut Vec<f32>>]) {
    let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
    let (bs, ci, h, wd, co, kh, kw) = conv2d_check(x, w, b).expect("checked in forward");
    let (ph, pw) = (kh / 2, kw / 2);
    let xd = x.data();
    let wdat = w.data();

    if let Some(gb) = sinks[2].as_deref_mut() {
        for n in 0..bs {
            for o in 0..co {
                let gplane = &gout[(n * co + o) * h * wd..(n * co + o + 1) * h * wd];
                gb[o] += gplane.iter().sum::<f32>();
            }
        }
    }

    for n in 0..bs {
        for o in 0..co {
            let gplane = &gout[(n * co + o) * h * wd..(n * co + o + 1) * h * wd];
            for c in 0..ci {
                let xplane = &xd[(n * ci + c) * h * wd..(n * ci + c + 1) * h * wd];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let y0 = ph.saturating_sub(dy);
                        let y1 = (h + ph).saturating_sub(dy).min(h);
                        let x0 = pw.saturating_sub(dx);
                        let x1 = (wd + pw).saturating_sub(dx).min(wd);
                        if let Some(gw) = sinks[1].as_deref_mut() {
                            let mut acc = 0.0f32;
                            for y in y0..y1 {
                                let sy = y + dy - ph;
                                let grow = &gplane[y * wd + x0..y * wd + x1];
                                let xrow =
                                    &xplane[sy * wd + (x0 + dx - pw)..sy * wd + (x1 + dx - pw)];
                                for (g, xv) in grow.iter().zip(xrow) {
                                    acc += g * xv;
                                }
                            }
                            gw[((o * ci + c) * kh + dy) * kw + dx] += acc;
                        }
                        if let Some(gx) = sinks[0].as_deref_mut() {
                            let wv = wdat[((o * ci + c) * kh + dy) * kw + dx];
                            if wv != 0.0 {
                                let gxplane =
                                    &mut gx[(n * ci + c) * h * wd..(n * ci + c + 1) * h * wd];
                                for y in y0..y1 {
                                    let sy = y + dy - ph;
                                    let grow = &gplane[y * wd + x0..y * wd + x1];
                                    let gx_row = &mut gxplane
                                        [sy * wd + (x0 + dx - pw)..sy * wd + (x1 + dx - pw)];
                                    for (gx, g) in gx_row.iter_mut().zip(grow) {
                                        *gx += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ------------------------------------------------------------- pad/slice --

fn pad_fwd(x: &Tensor, before: &[usize], after: &[usize]) -> Result<Tensor> {
    let rank = x.shape().len();
    if before.len() != rank || after.len() != rank {
        return Err(Error::shape(
            "pad",
            format!("rank {} with {} pad entries", rank, before.len()),
        ));
    }
    let oshape: Vec<usize> = x
        .shape()
        .iter()
        .zip(before.iter().zip(after))
        .map(|(&d, (&b, &a))| d + b + a)
        .collect();
    let mut out = Tensor::zeros(&oshape);
    let in_strides = strides(x.shape());
    let out_strides = strides(&oshape);
    let n = x.numel();
    let out_data = out.data_mut();
    for idx in 0..n {
        let mut rem = idx;
        let mut oidx = 0;
        for ax in 0..rank {
            let coord = rem / in_strides[ax];
            rem %= in_strides[ax];
            oidx += (coord + before[ax]) * out_strides[ax];
        }
        out_data[oidx] = x.data()[idx];
    }
    Ok(out)
}

fn pad_bwd(in_shape: &[usize], before: &[usize], after: &[usize], gout: &[f32], g: &mut [f32]) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = in_shape
        .iter()
        .enumerate()
        .map(|(ax, &d)| d + before[ax] + after[ax])
        .collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    for (idx, gv) in g.iter_mut().enumerate() {
        let mut rem = idx;
        let mut oidx = 0;
        for ax in 0..rank {
            let coord = rem / in_strides[ax];
            rem %= in_strides[ax];
            oidx += (coord + before[ax]) * out_strides[ax];
        }
        *gv += gout[oidx];
    }
}

fn slice_fwd(x: &Tensor, start: &[usize], len: &[usize]) -> Result<Tensor> {
    let rank = x.shape().len();
    if start.len() != rank || len.len() != rank {
        return Err(Error::shape(
            "slice",
            format!("rank {} with {} range entries", rank, start.len()),
        ));
    }
    for ax in 0..rank {
        if len[ax] == 0 || start[ax] + len[ax] > x.shape()[ax] {
            return Err(Error::shape(
                "slice",
                format!(
                    "axis {}: [{}, {}) out of extent {}",
                    ax,
                    start[ax],
                    start[ax] + len[ax],
                    x.shape()[ax]
                ),
            ));
        }
    }
    let in_strides = strides(x.shape());
    let out_strides = strides(len);
    let n: usize = len.iter().product();
    let mut out = vec![0.0f32; n];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut rem = idx;
        let mut iidx = 0;
        for ax in 0..rank {
            let coord = rem / out_strides[ax];
            rem %= out_strides[ax];
            iidx += (coord + start[ax]) * in_strides[ax];
        }
        *o = x.data()[iidx];
    }
    Tensor::new(len, out)
}

fn slice_bwd(in_shape: &[usize], start: &[usize], len: &[usize], gout: &[f32], g: &mut [f32]) {
    let rank = in_shape.len();
    let in_strides = strides(in_shape);
    let out_strides = strides(len);
    for (idx, gv) in gout.iter().enumerate() {
        let mut rem = idx;
        let mut iidx = 0;
        for ax in 0..rank {
            let coord = rem / out_strides[ax];
            rem %= out_strides[ax];
            iidx += (coord + start[ax]) * in_strides[ax];
        }
        g[iidx] += gv;
    }
}

// -------------------------------------------------------------- softmax --

fn softmax_fwd(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(Error::shape("softmax", "rank-0 input".to_string()));
    }
    let cols = *shape.last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(shape, out)
}

fn softmax_bwd(output: &Tensor, gout: &[f32], g: &mut [f32]) {
    let cols = *output.shape().last().unwrap();
    for (r, row) in output.data().chunks(cols).enumerate() {
        let grow = &gout[r * cols..(r + 1) * cols];
        let dot: f32 = row.iter().zip(grow).map(|(y, dy)| y * dy).sum();
        let gsink = &mut g[r * cols..(r + 1) * cols];
        for ((gs, y), dy) in gsink.iter_mut().zip(row).zip(grow) {
            *gs += y * (dy - dot);
        }
    }
}
