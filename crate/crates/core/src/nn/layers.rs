//! Layer definitions, shape inference, and the forward/backward passes.
//!
//! Convolutions are cross-correlations (no kernel flip), matching the
//! usual deep-learning convention. Parallelism only ever splits work
//! along disjoint output regions — batch samples or parameter rows — and
//! every reduction runs in a fixed order, so results are bit-identical
//! for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::util::worker_pool;

use super::tensor::{Elem, Tensor};
use super::NnError;

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output spatial size = ceil(input / stride); zero padding split
    /// evenly with the extra row/column after.
    Same,
    /// No padding; output = floor((input - kernel) / stride) + 1.
    Valid,
}

/// One layer of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        pool: usize,
        stride: usize,
    },
    Relu,
    Sigmoid,
    Softmax,
    Dropout {
        rate: f32,
    },
    Flatten,
    Dense {
        out_units: usize,
    },
}

fn same_pad_before(input: usize, kernel: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    total / 2
}

/// Output shape of a single layer for a given input shape. The batch
/// dimension rides along unchanged.
pub fn output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, String> {
    match *layer {
        LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding } => {
            let [n, h, w, _c] = rank4(input, "conv2d")?;
            if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                return Err("conv2d needs positive kernel, stride, and channels".to_string());
            }
            let (oh, ow) = match padding {
                Padding::Same => (h.div_ceil(stride), w.div_ceil(stride)),
                Padding::Valid => {
                    if h < kernel_h || w < kernel_w {
                        return Err(format!(
                            "valid conv kernel {kernel_h}x{kernel_w} exceeds input {h}x{w}"
                        ));
                    }
                    ((h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1)
                }
            };
            if oh == 0 || ow == 0 {
                return Err(format!("conv2d output collapsed to {oh}x{ow}"));
            }
            Ok(vec![n, oh, ow, out_channels])
        }
        LayerSpec::MaxPool2d { pool, stride } => {
            let [n, h, w, c] = rank4(input, "maxpool2d")?;
            if pool == 0 || stride == 0 {
                return Err("maxpool2d needs positive pool and stride".to_string());
            }
            if h < pool || w < pool {
                return Err(format!("pool {pool} exceeds input {h}x{w}"));
            }
            Ok(vec![n, (h - pool) / stride + 1, (w - pool) / stride + 1, c])
        }
        LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        LayerSpec::Sigmoid | LayerSpec::Softmax => {
            if input.len() != 2 {
                return Err(format!(
                    "output activation expects a [batch, units] input, got {input:?}"
                ));
            }
            Ok(input.to_vec())
        }
        LayerSpec::Flatten => {
            if input.len() < 2 {
                return Err(format!("flatten expects rank >= 2, got {input:?}"));
            }
            Ok(vec![input[0], input[1..].iter().product()])
        }
        LayerSpec::Dense { out_units } => {
            if input.len() != 2 {
                return Err(format!("dense expects a [batch, features] input, got {input:?}"));
            }
            if out_units == 0 {
                return Err("dense needs positive width".to_string());
            }
            Ok(vec![input[0], out_units])
        }
    }
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4], String> {
    if shape.len() != 4 {
        return Err(format!("{what} expects a [batch, h, w, c] input, got {shape:?}"));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

// ---------------------------------------------------------------------------
// Convolution

/// Cross-correlation plus bias over NHWC input with an
/// [kh, kw, c_in, c_out] kernel.
pub fn conv2d_forward<F: Elem>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<F>, NnError> {
    let [n, h, wd, cin] =
        rank4(x.shape(), "conv2d").map_err(NnError::ShapeMismatch)?;
    let [kh, kw, wcin, cout] =
        rank4(w.shape(), "conv2d kernel").map_err(NnError::ShapeMismatch)?;
    if wcin != cin {
        return Err(NnError::ShapeMismatch(format!(
            "kernel expects {wcin} input channels, input has {cin}"
        )));
    }
    if b.shape() != [cout] {
        return Err(NnError::ShapeMismatch(format!(
            "bias shape {:?} does not match {cout} output channels",
            b.shape()
        )));
    }
    let spec = LayerSpec::Conv2d {
        out_channels: cout,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    let out_shape = output_shape(&spec, x.shape()).map_err(NnError::ShapeMismatch)?;
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (pad_y, pad_x) = match padding {
        Padding::Same => (same_pad_before(h, kh, stride), same_pad_before(wd, kw, stride)),
        Padding::Valid => (0, 0),
    };

    let xf: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
    let wf: Vec<f64> = w.data().iter().map(|v| v.to_f64()).collect();
    let bf: Vec<f64> = b.data().iter().map(|v| v.to_f64()).collect();

    let mut out = vec![F::ZERO; n * oh * ow * cout];
    worker_pool().install(|| {
        out.par_chunks_mut(oh * ow * cout).enumerate().for_each(|(ni, sample)| {
            let mut acc = vec![0.0f64; cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    acc.copy_from_slice(&bf);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = (((ni * h + iy as usize) * wd) + ix as usize) * cin;
                            let wbase = ((ky * kw + kx) * cin) * cout;
                            for ci in 0..cin {
                                let xv = xf[xbase + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &wf[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                    let obase = (oy * ow + ox) * cout;
                    for co in 0..cout {
                        sample[obase + co] = F::from_f64(acc[co]);
                    }
                }
            }
        });
    });
    Tensor::from_vec(&out_shape, out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel, bias.
pub fn conv2d_backward<F: Elem>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), NnError> {
    let [n, h, wd, cin] =
        rank4(x.shape(), "conv2d").map_err(NnError::ShapeMismatch)?;
    let [kh, kw, _, cout] =
        rank4(w.shape(), "conv2d kernel").map_err(NnError::ShapeMismatch)?;
    let [gn, oh, ow, gcout] =
        rank4(grad_out.shape(), "conv2d gradient").map_err(NnError::ShapeMismatch)?;
    if gn != n || gcout != cout {
        return Err(NnError::ShapeMismatch(format!(
            "gradient shape {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let (pad_y, pad_x) = match padding {
        Padding::Same => (same_pad_before(h, kh, stride), same_pad_before(wd, kw, stride)),
        Padding::Valid => (0, 0),
    };

    let xf: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
    let wf: Vec<f64> = w.data().iter().map(|v| v.to_f64()).collect();
    let gf: Vec<f64> = grad_out.data().iter().map(|v| v.to_f64()).collect();

    // Bias gradient: plain sum over batch and spatial positions.
    let mut gb = vec![0.0f64; cout];
    for pos in gf.chunks_exact(cout) {
        for (a, &g) in gb.iter_mut().zip(pos) {
            *a += g;
        }
    }

    // Kernel gradient: rows (ky, kx, ci) are disjoint, so they can be
    // filled in parallel while each row's batch sum stays ordered.
    let mut gw = vec![0.0f64; kh * kw * cin * cout];
    worker_pool().install(|| {
        gw.par_chunks_mut(cout).enumerate().for_each(|(row, out_row)| {
            let ci = row % cin;
            let kx = (row / cin) % kw;
            let ky = row / (cin * kw);
            for ni in 0..n {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad_y as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad_x as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xv = xf[(((ni * h + iy as usize) * wd) + ix as usize) * cin + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let gbase = ((ni * oh + oy) * ow + ox) * cout;
                        let grow = &gf[gbase..gbase + cout];
                        for (a, &g) in out_row.iter_mut().zip(grow) {
                            *a += xv * g;
                        }
                    }
                }
            }
        });
    });

    // Input gradient: batch samples are disjoint.
    let mut gx = vec![F::ZERO; n * h * wd * cin];
    worker_pool().install(|| {
        gx.par_chunks_mut(h * wd * cin).enumerate().for_each(|(ni, sample)| {
            let mut acc = vec![0.0f64; h * wd * cin];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gbase = ((ni * oh + oy) * ow + ox) * cout;
                    let grow = &gf[gbase..gbase + cout];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad_y as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad_x as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let abase = ((iy as usize * wd) + ix as usize) * cin;
                            let wbase = ((ky * kw + kx) * cin) * cout;
                            for ci in 0..cin {
                                let wrow = &wf[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let mut s = 0.0;
                                for (&g, &wv) in grow.iter().zip(wrow) {
                                    s += g * wv;
                                }
                                acc[abase + ci] += s;
                            }
                        }
                    }
                }
            }
            for (o, &a) in sample.iter_mut().zip(&acc) {
                *o = F::from_f64(a);
            }
        });
    });

    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw.into_iter().map(F::from_f64).collect())?,
        Tensor::from_vec(&[cout], gb.into_iter().map(F::from_f64).collect())?,
    ))
}

// ---------------------------------------------------------------------------
// Max pooling

/// Window max plus the flat input index of each window's winner. Ties
/// go to the first position in row-major window order.
pub fn maxpool2d_forward<F: Elem>(
    x: &Tensor<F>,
    pool: usize,
    stride: usize,
) -> Result<(Tensor<F>, Vec<usize>), NnError> {
    let [n, h, w, c] = rank4(x.shape(), "maxpool2d").map_err(NnError::ShapeMismatch)?;
    let spec = LayerSpec::MaxPool2d { pool, stride };
    let out_shape = output_shape(&spec, x.shape()).map_err(NnError::ShapeMismatch)?;
    let (oh, ow) = (out_shape[1], out_shape[2]);

    let xd = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best_idx = 0usize;
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..pool {
                        for kx in 0..pool {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let idx = (((ni * h + iy) * w) + ix) * c + ci;
                            let v = xd[idx].to_f64();
                            // Strictly greater: first index wins ties.
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(xd[best_idx]);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&out_shape, out)?, argmax))
}

/// Routes each output gradient back to its argmax position.
pub fn maxpool2d_backward<F: Elem>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<F>,
) -> Result<Tensor<F>, NnError> {
    if argmax.len() != grad_out.numel() {
        return Err(NnError::ShapeMismatch(format!(
            "argmax has {} entries for {} gradients",
            argmax.len(),
            grad_out.numel()
        )));
    }
    let numel: usize = input_shape.iter().product();
    let mut acc = vec![0.0f64; numel];
    for (&idx, g) in argmax.iter().zip(grad_out.data()) {
        acc[idx] += g.to_f64();
    }
    Tensor::from_vec(input_shape, acc.into_iter().map(F::from_f64).collect())
}

// ---------------------------------------------------------------------------
// Dense

/// `[n, d] x [d, u] + [u]`.
pub fn dense_forward<F: Elem>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>, NnError> {
    let (n, d) = rank2(x.shape(), "dense input")?;
    let (wd, u) = rank2(w.shape(), "dense weights")?;
    if wd != d || b.shape() != [u] {
        return Err(NnError::ShapeMismatch(format!(
            "dense shapes: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let xf: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
    let wf: Vec<f64> = w.data().iter().map(|v| v.to_f64()).collect();
    let bf: Vec<f64> = b.data().iter().map(|v| v.to_f64()).collect();

    let mut out = vec![F::ZERO; n * u];
    worker_pool().install(|| {
        out.par_chunks_mut(u).enumerate().for_each(|(ni, row)| {
            let mut acc = bf.clone();
            for di in 0..d {
                let xv = xf[ni * d + di];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wf[di * u..(di + 1) * u];
                for (a, &wv) in acc.iter_mut().zip(wrow) {
                    *a += xv * wv;
                }
            }
            for (o, &a) in row.iter_mut().zip(&acc) {
                *o = F::from_f64(a);
            }
        });
    });
    Tensor::from_vec(&[n, u], out)
}

/// Gradients of [`dense_forward`].
pub fn dense_backward<F: Elem>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), NnError> {
    let (n, d) = rank2(x.shape(), "dense input")?;
    let (_, u) = rank2(w.shape(), "dense weights")?;
    if grad_out.shape() != [n, u] {
        return Err(NnError::ShapeMismatch(format!(
            "dense gradient shape {:?}, expected [{n}, {u}]",
            grad_out.shape()
        )));
    }
    let xf: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();
    let wf: Vec<f64> = w.data().iter().map(|v| v.to_f64()).collect();
    let gf: Vec<f64> = grad_out.data().iter().map(|v| v.to_f64()).collect();

    let mut gb = vec![0.0f64; u];
    for row in gf.chunks_exact(u) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a += g;
        }
    }

    let mut gw = vec![0.0f64; d * u];
    worker_pool().install(|| {
        gw.par_chunks_mut(u).enumerate().for_each(|(di, out_row)| {
            for ni in 0..n {
                let xv = xf[ni * d + di];
                if xv == 0.0 {
                    continue;
                }
                let grow = &gf[ni * u..(ni + 1) * u];
                for (a, &g) in out_row.iter_mut().zip(grow) {
                    *a += xv * g;
                }
            }
        });
    });

    let mut gx = vec![F::ZERO; n * d];
    worker_pool().install(|| {
        gx.par_chunks_mut(d).enumerate().for_each(|(ni, row)| {
            let grow = &gf[ni * u..(ni + 1) * u];
            for di in 0..d {
                let wrow = &wf[di * u..(di + 1) * u];
                let mut s = 0.0;
                for (&g, &wv) in grow.iter().zip(wrow) {
                    s += g * wv;
                }
                row[di] = F::from_f64(s);
            }
        });
    });

    Ok((
        Tensor::from_vec(&[n, d], gx)?,
        Tensor::from_vec(&[d, u], gw.into_iter().map(F::from_f64).collect())?,
        Tensor::from_vec(&[u], gb.into_iter().map(F::from_f64).collect())?,
    ))
}

fn rank2(shape: &[usize], what: &str) -> Result<(usize, usize), NnError> {
    if shape.len() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "{what} expects rank 2, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

// ---------------------------------------------------------------------------
// Activations

pub(super) fn relu_forward<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v.to_f64() > 0.0 { v } else { F::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub(super) fn relu_backward<F: Elem>(x: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v.to_f64() > 0.0 { g } else { F::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub(super) fn sigmoid_forward<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .map(|&v| F::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Sigmoid gradient written in terms of the forward output.
pub(super) fn sigmoid_backward<F: Elem>(y: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| {
            let yf = y.to_f64();
            F::from_f64(g.to_f64() * yf * (1.0 - yf))
        })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// Row-wise softmax over a `[n, c]` tensor, max-shifted for stability.
pub(super) fn softmax_forward<F: Elem>(x: &Tensor<F>) -> Tensor<F> {
    let c = x.shape()[1];
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| F::from_f64(e / sum)));
    }
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Softmax Jacobian-vector product in terms of the forward output:
/// dL/dz_i = p_i (g_i - sum_j g_j p_j).
pub(super) fn softmax_backward<F: Elem>(y: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let c = y.shape()[1];
    let mut data = Vec::with_capacity(y.numel());
    for (prow, grow) in y.data().chunks_exact(c).zip(grad.data().chunks_exact(c)) {
        let dot: f64 = prow
            .iter()
            .zip(grow)
            .map(|(&p, &g)| p.to_f64() * g.to_f64())
            .sum();
        for (&p, &g) in prow.iter().zip(grow) {
            data.push(F::from_f64(p.to_f64() * (g.to_f64() - dot)));
        }
    }
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted-dropout scale factors: 0 with probability `rate`, otherwise
/// 1/(1-rate), drawn from a seeded generator.
pub fn dropout_mask<F: Elem>(numel: usize, rate: f32, seed: u64) -> Vec<F> {
    let rate = f64::from(rate);
    let keep_scale = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::ZERO
            } else {
                F::from_f64(keep_scale)
            }
        })
        .collect()
}
