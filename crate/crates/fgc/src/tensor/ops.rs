//! Differentiable primitive operations.
//!
//! Every primitive validates shapes, computes its forward value with a fixed
//! sequential accumulation order (bit-reproducible), checks the output for
//! NaN/Inf, and - when the tape is recording and any input requires a
//! gradient - pushes a backward closure onto the tape.

use std::cell::RefCell;
use std::rc::Rc;

use super::{ensure_finite, Mode, Tape, Tensor};
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Raw matrix kernels (row-major, deterministic accumulation over the inner
// index in ascending order).
// ---------------------------------------------------------------------------

/// out[m x n] += a[m x k] . b[k x n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m x n] += a[m x k] . b[n x k]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            orow[j] += acc;
        }
    }
}

/// out[m x n] += a[k x m]^T . b[k x n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = require_2d("matmul", a)?;
    let (kb, n) = require_2d("matmul", b)?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = ka;
    let mut out = vec![0.0; m * n];
    mm_nn(&a.data(), &b.data(), m, k, n, &mut out);
    ensure_finite("matmul", &out)?;
    let tracked = tape.tracks(&[a, b]);
    let y = Tensor::output(vec![m, n], out, tracked);
    if tracked {
        let (a2, b2) = (a.clone(), b.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                if a2.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    mm_nt(g, &b2.data(), m, n, k, &mut da);
                    a2.accumulate_grad(&da);
                }
                if b2.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    mm_tn(&a2.data(), g, k, m, n, &mut db);
                    b2.accumulate_grad(&db);
                }
            }),
        );
    }
    Ok(y)
}

/// y[n x out] = x[n x in] . w[out x in]^T + bias[out]
pub fn linear(tape: &Tape, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, fin) = require_2d("linear", x)?;
    let (fout, fw) = require_2d("linear", w)?;
    if fin != fw || bias.shape() != [fout] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * fout];
    mm_nt(&x.data(), &w.data(), n, fin, fout, &mut out);
    {
        let b = bias.data();
        for row in out.chunks_exact_mut(fout) {
            for (o, bv) in row.iter_mut().zip(b.iter()) {
                *o += bv;
            }
        }
    }
    ensure_finite("linear", &out)?;
    let tracked = tape.tracks(&[x, w, bias]);
    let y = Tensor::output(vec![n, fout], out, tracked);
    if tracked {
        let (x2, w2, b2) = (x.clone(), w.clone(), bias.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                if x2.requires_grad() {
                    let mut dx = vec![0.0; n * fin];
                    mm_nn(g, &w2.data(), n, fout, fin, &mut dx);
                    x2.accumulate_grad(&dx);
                }
                if w2.requires_grad() {
                    let mut dw = vec![0.0; fout * fin];
                    mm_tn(g, &x2.data(), fout, n, fin, &mut dw);
                    w2.accumulate_grad(&dw);
                }
                if b2.requires_grad() {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks_exact(fout) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    b2.accumulate_grad(&db);
                }
            }),
        );
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation convention) via im2col + matmul
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    r: usize,
    s: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvDims> {
    let (n, c, h, wid) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    let (k, cw, r, s) = match w.shape() {
        [k, c, r, s] => (*k, *c, *r, *s),
        other => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: other.to_vec(),
            })
        }
    };
    if c != cw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::config("conv2d stride must be >= 1"));
    }
    let hp = h + 2 * padding;
    let wp = wid + 2 * padding;
    if hp < r || wp < s || (hp - r) % stride != 0 || (wp - s) % stride != 0 {
        return Err(Error::config(format!(
            "conv2d output extent is not integral: input {}x{} (pad {}), kernel {}x{}, stride {}",
            h, wid, padding, r, s, stride
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w: wid,
        k,
        r,
        s,
        stride,
        padding,
        oh: (hp - r) / stride + 1,
        ow: (wp - s) / stride + 1,
    })
}

/// cols[(n*oh*ow) x (c*r*s)], zero-filled where the window leaves the input.
fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let patch = d.c * d.r * d.s;
    let mut cols = vec![0.0; d.n * d.oh * d.ow * patch];
    for n in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((n * d.oh + oh) * d.ow + ow) * patch;
                for c in 0..d.c {
                    for r in 0..d.r {
                        let ih = (oh * d.stride + r) as isize - d.padding as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let xbase = ((n * d.c + c) * d.h + ih as usize) * d.w;
                        let cbase = row + (c * d.r + r) * d.s;
                        for s in 0..d.s {
                            let iw = (ow * d.stride + s) as isize - d.padding as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            cols[cbase + s] = x[xbase + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input image layout.
fn col2im(dcols: &[f64], d: ConvDims) -> Vec<f64> {
    let patch = d.c * d.r * d.s;
    let mut dx = vec![0.0; d.n * d.c * d.h * d.w];
    for n in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((n * d.oh + oh) * d.ow + ow) * patch;
                for c in 0..d.c {
                    for r in 0..d.r {
                        let ih = (oh * d.stride + r) as isize - d.padding as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        let xbase = ((n * d.c + c) * d.h + ih as usize) * d.w;
                        let cbase = row + (c * d.r + r) * d.s;
                        for s in 0..d.s {
                            let iw = (ow * d.stride + s) as isize - d.padding as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            dx[xbase + iw as usize] += dcols[cbase + s];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d(tape: &Tape, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let d = conv_dims(x, w, stride, padding)?;
    let patch = d.c * d.r * d.s;
    let rows = d.n * d.oh * d.ow;
    let cols = im2col(&x.data(), d);
    // out_mat[rows x k] = cols . w^T
    let mut out_mat = vec![0.0; rows * d.k];
    mm_nt(&cols, &w.data(), rows, patch, d.k, &mut out_mat);
    // Rearrange [n, oh, ow, k] rows into [n, k, oh, ow].
    let mut out = vec![0.0; d.n * d.k * d.oh * d.ow];
    for n in 0..d.n {
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let row = ((n * d.oh + oh) * d.ow + ow) * d.k;
                for k in 0..d.k {
                    out[((n * d.k + k) * d.oh + oh) * d.ow + ow] = out_mat[row + k];
                }
            }
        }
    }
    ensure_finite("conv2d", &out)?;
    let tracked = tape.tracks(&[x, w]);
    let y = Tensor::output(vec![d.n, d.k, d.oh, d.ow], out, tracked);
    if tracked {
        let (x2, w2) = (x.clone(), w.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                // g arrives as [n, k, oh, ow]; regroup to [rows x k].
                let mut g_mat = vec![0.0; rows * d.k];
                for n in 0..d.n {
                    for k in 0..d.k {
                        for oh in 0..d.oh {
                            for ow in 0..d.ow {
                                g_mat[((n * d.oh + oh) * d.ow + ow) * d.k + k] =
                                    g[((n * d.k + k) * d.oh + oh) * d.ow + ow];
                            }
                        }
                    }
                }
                let cols = im2col(&x2.data(), d);
                if w2.requires_grad() {
                    let mut dw = vec![0.0; d.k * patch];
                    mm_tn(&g_mat, &cols, d.k, rows, patch, &mut dw);
                    w2.accumulate_grad(&dw);
                }
                if x2.requires_grad() {
                    let mut dcols = vec![0.0; rows * patch];
                    mm_nn(&g_mat, &w2.data(), rows, d.k, patch, &mut dcols);
                    x2.accumulate_grad(&col2im(&dcols, d));
                }
            }),
        );
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

fn unary(
    tape: &Tape,
    op: &'static str,
    x: &Tensor,
    forward: impl Fn(f64) -> f64,
    // local derivative as a function of (input value, output value)
    derivative: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| forward(v)).collect();
    ensure_finite(op, &out)?;
    let tracked = tape.tracks(&[x]);
    let y = Tensor::output(x.shape().to_vec(), out, tracked);
    if tracked {
        let (x2, y2) = (x.clone(), y.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                let xd = x2.data();
                let yd = y2.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter().zip(yd.iter()))
                    .map(|(&gv, (&xv, &yv))| gv * derivative(xv, yv))
                    .collect();
                drop(xd);
                x2.accumulate_grad(&dx);
            }),
        );
    }
    Ok(y)
}

pub fn relu(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "relu", x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
}

pub fn sigmoid(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(
        tape,
        "sigmoid",
        x,
        |v| 1.0 / (1.0 + (-v).exp()),
        |_, yv| yv * (1.0 - yv),
    )
}

pub fn exp(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(tape, "exp", x, f64::exp, |_, yv| yv)
}

pub fn log(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = x.data().iter().find(|v| **v <= 0.0) {
        return Err(Error::numeric("log", format!("argument {bad} outside (0, inf)")));
    }
    unary(tape, "log", x, f64::ln, |xv, _| 1.0 / xv)
}

/// Clamp into [0, 1]; gradient passes only strictly inside the interval.
pub fn clamp_unit(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    unary(
        tape,
        "clamp_unit",
        x,
        |v| v.clamp(0.0, 1.0),
        |xv, _| if xv > 0.0 && xv < 1.0 { 1.0 } else { 0.0 },
    )
}

pub fn scale(tape: &Tape, x: &Tensor, factor: f64) -> Result<Tensor> {
    unary(tape, "scale", x, move |v| v * factor, move |_, _| factor)
}

pub fn add_scalar(tape: &Tape, x: &Tensor, offset: f64) -> Result<Tensor> {
    unary(tape, "add_scalar", x, move |v| v + offset, |_, _| 1.0)
}

fn binary(
    tape: &Tape,
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    forward: impl Fn(f64, f64) -> f64,
    backward: impl Fn(&[f64], &Tensor, &Tensor) -> (Vec<f64>, Vec<f64>) + 'static,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&av, &bv)| forward(av, bv))
        .collect();
    ensure_finite(op, &out)?;
    let tracked = tape.tracks(&[a, b]);
    let y = Tensor::output(a.shape().to_vec(), out, tracked);
    if tracked {
        let (a2, b2) = (a.clone(), b.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                let (da, db) = backward(g, &a2, &b2);
                if a2.requires_grad() {
                    a2.accumulate_grad(&da);
                }
                if b2.requires_grad() {
                    b2.accumulate_grad(&db);
                }
            }),
        );
    }
    Ok(y)
}

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, "add", a, b, |x, y| x + y, |g, _, _| (g.to_vec(), g.to_vec()))
}

pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        tape,
        "sub",
        a,
        b,
        |x, y| x - y,
        |g, _, _| (g.to_vec(), g.iter().map(|v| -v).collect()),
    )
}

pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(
        tape,
        "mul",
        a,
        b,
        |x, y| x * y,
        |g, a, b| {
            let ad = a.data();
            let bd = b.data();
            let da = g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect();
            let db = g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect();
            (da, db)
        },
    )
}

// ---------------------------------------------------------------------------
// Reductions and pooling
// ---------------------------------------------------------------------------

pub fn sum(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().sum();
    ensure_finite("sum", &[total])?;
    let tracked = tape.tracks(&[x]);
    let y = Tensor::output(vec![], vec![total], tracked);
    if tracked {
        let x2 = x.clone();
        tape.record(
            y.clone(),
            Box::new(move |g| {
                x2.accumulate_grad(&vec![g[0]; x2.numel()]);
            }),
        );
    }
    Ok(y)
}

pub fn mean(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let n = x.numel() as f64;
    let s = sum(tape, x)?;
    scale(tape, &s, 1.0 / n)
}

/// [n, c, h, w] -> [n, c] spatial mean. A 2-d input passes through unchanged
/// (zero-extent spatial grid), so fully-connected features pool trivially.
pub fn global_avg_pool(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let (n, c, hw) = match x.shape() {
        [n, c, h, w] => (*n, *c, h * w),
        [n, c] => (*n, *c, 1),
        other => {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    let xd = x.data();
    let mut out = vec![0.0; n * c];
    for i in 0..n * c {
        let base = i * hw;
        let mut acc = 0.0;
        for j in 0..hw {
            acc += xd[base + j];
        }
        out[i] = acc / hw as f64;
    }
    drop(xd);
    ensure_finite("global_avg_pool", &out)?;
    let tracked = tape.tracks(&[x]);
    let y = Tensor::output(vec![n, c], out, tracked);
    if tracked {
        let x2 = x.clone();
        tape.record(
            y.clone(),
            Box::new(move |g| {
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; n * c * hw];
                for i in 0..n * c {
                    let gv = g[i] * inv;
                    for j in 0..hw {
                        dx[i * hw + j] = gv;
                    }
                }
                x2.accumulate_grad(&dx);
            }),
        );
    }
    Ok(y)
}

/// Per-channel gate applied to a feature map: out[n, c, ...] = gate[n, c] * x[n, c, ...].
///
/// A gate of exactly 0.0 writes exact +0.0 outputs, so a closed channel is
/// bit-identical to never computing it (skip-path equivalence).
pub fn channel_mul(tape: &Tape, gate: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, c, hw) = match x.shape() {
        [n, c, h, w] => (*n, *c, h * w),
        [n, c] => (*n, *c, 1),
        other => {
            return Err(Error::ShapeMismatch {
                op: "channel_mul",
                lhs: gate.shape().to_vec(),
                rhs: other.to_vec(),
            })
        }
    };
    if gate.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "channel_mul",
            lhs: gate.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let gd = gate.data();
    let xd = x.data();
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n * c {
        let gv = gd[i];
        if gv == 0.0 {
            continue; // leave exact +0.0
        }
        for j in 0..hw {
            out[i * hw + j] = gv * xd[i * hw + j];
        }
    }
    drop(gd);
    drop(xd);
    ensure_finite("channel_mul", &out)?;
    let tracked = tape.tracks(&[gate, x]);
    let y = Tensor::output(x.shape().to_vec(), out, tracked);
    if tracked {
        let (g2, x2) = (gate.clone(), x.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                if g2.requires_grad() {
                    let xd = x2.data();
                    let mut dgate = vec![0.0; n * c];
                    for i in 0..n * c {
                        let mut acc = 0.0;
                        for j in 0..hw {
                            acc += g[i * hw + j] * xd[i * hw + j];
                        }
                        dgate[i] = acc;
                    }
                    drop(xd);
                    g2.accumulate_grad(&dgate);
                }
                if x2.requires_grad() {
                    let gd = g2.data();
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n * c {
                        let gv = gd[i];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..hw {
                            dx[i * hw + j] = gv * g[i * hw + j];
                        }
                    }
                    drop(gd);
                    x2.accumulate_grad(&dx);
                }
            }),
        );
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Exponentially averaged statistics used at evaluation time.
#[derive(Debug)]
pub struct RunningStats {
    pub mean: RefCell<Vec<f64>>,
    pub var: RefCell<Vec<f64>>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(vec![0.0; channels]),
            var: RefCell::new(vec![1.0; channels]),
            momentum: 0.1,
        }
    }
}

fn bn_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, c] => Ok((*n, *c, 1)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Batch normalization over the channel axis.
///
/// Training mode uses batch statistics (biased variance for normalization,
/// unbiased for the running update) and rejects batches of size 1; eval mode
/// uses the running statistics. Epsilon is fixed at 1e-5.
pub fn batchnorm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: Mode,
) -> Result<Tensor> {
    let (n, c, hw) = bn_dims("batchnorm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::contract(
                    "batchnorm in training mode requires batch size >= 2 (variance undefined)",
                ));
            }
            batchnorm_train(tape, x, gamma, beta, running, n, c, hw)
        }
        Mode::Eval => batchnorm_eval(tape, x, gamma, beta, running, n, c, hw),
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_train(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    n: usize,
    c: usize,
    hw: usize,
) -> Result<Tensor> {
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                acc += xd[base + j];
            }
        }
        mean[ch] = acc / m;
        let mut vacc = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let d = xd[base + j] - mean[ch];
                vacc += d * d;
            }
        }
        var[ch] = vacc / m;
    }
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();

    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![0.0; n * c * hw];
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                let h = (xd[base + j] - mean[ch]) * invstd[ch];
                xhat[base + j] = h;
                out[base + j] = gd[ch] * h + bd[ch];
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    ensure_finite("batchnorm", &out)?;

    // Running statistics track the unbiased batch variance.
    {
        let mom = running.momentum;
        let mut rm = running.mean.borrow_mut();
        let mut rv = running.var.borrow_mut();
        let unbias = m / (m - 1.0);
        for ch in 0..c {
            rm[ch] = (1.0 - mom) * rm[ch] + mom * mean[ch];
            rv[ch] = (1.0 - mom) * rv[ch] + mom * var[ch] * unbias;
        }
    }

    let tracked = tape.tracks(&[x, gamma, beta]);
    let y = Tensor::output(x.shape().to_vec(), out, tracked);
    if tracked {
        let (x2, g2, b2) = (x.clone(), gamma.clone(), beta.clone());
        let xhat = Rc::new(xhat);
        let invstd = Rc::new(invstd);
        tape.record(
            y.clone(),
            Box::new(move |g| {
                let mut dbeta = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in 0..hw {
                            dbeta[ch] += g[base + j];
                            dgamma[ch] += g[base + j] * xhat[base + j];
                        }
                    }
                }
                if x2.requires_grad() {
                    let gam = g2.data();
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let coef = gam[ch] * invstd[ch] / m;
                            for j in 0..hw {
                                dx[base + j] = coef
                                    * (m * g[base + j]
                                        - dbeta[ch]
                                        - xhat[base + j] * dgamma[ch]);
                            }
                        }
                    }
                    drop(gam);
                    x2.accumulate_grad(&dx);
                }
                if g2.requires_grad() {
                    g2.accumulate_grad(&dgamma);
                }
                if b2.requires_grad() {
                    b2.accumulate_grad(&dbeta);
                }
            }),
        );
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_eval(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    n: usize,
    c: usize,
    hw: usize,
) -> Result<Tensor> {
    let rm = running.mean.borrow().clone();
    let invstd: Vec<f64> = running
        .var
        .borrow()
        .iter()
        .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
        .collect();
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in 0..hw {
                out[base + j] = gd[ch] * (xd[base + j] - rm[ch]) * invstd[ch] + bd[ch];
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    ensure_finite("batchnorm", &out)?;
    let tracked = tape.tracks(&[x, gamma, beta]);
    let y = Tensor::output(x.shape().to_vec(), out, tracked);
    if tracked {
        let (x2, g2, b2) = (x.clone(), gamma.clone(), beta.clone());
        tape.record(
            y.clone(),
            Box::new(move |g| {
                if x2.requires_grad() {
                    let gam = g2.data();
                    let mut dx = vec![0.0; n * c * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for j in 0..hw {
                                dx[base + j] = g[base + j] * gam[ch] * invstd[ch];
                            }
                        }
                    }
                    drop(gam);
                    x2.accumulate_grad(&dx);
                }
                if g2.requires_grad() || b2.requires_grad() {
                    let xd = x2.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for j in 0..hw {
                                dbeta[ch] += g[base + j];
                                dgamma[ch] += g[base + j] * (xd[base + j] - rm[ch]) * invstd[ch];
                            }
                        }
                    }
                    drop(xd);
                    if g2.requires_grad() {
                        g2.accumulate_grad(&dgamma);
                    }
                    if b2.requires_grad() {
                        b2.accumulate_grad(&dbeta);
                    }
                }
            }),
        );
    }
    Ok(y)
}
