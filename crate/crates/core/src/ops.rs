//! Raw forward and backward kernels on flat slices.
//!
//! The tape records which kernel ran and replays the matching backward;
//! inference calls the forward kernels directly without recording.

use crate::activations::{self, ActKind};

/// out[s,o] = sum_i x[s,i] * w[o,i] + b[o]   (w stored out x in)
pub fn dense_forward(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    out: &mut [f32],
    batch: usize,
    n_in: usize,
    n_out: usize,
) {
    debug_assert_eq!(x.len(), batch * n_in);
    debug_assert_eq!(w.len(), n_out * n_in);
    debug_assert_eq!(b.len(), n_out);
    for s in 0..batch {
        let xs = &x[s * n_in..(s + 1) * n_in];
        let os = &mut out[s * n_out..(s + 1) * n_out];
        for (o, ov) in os.iter_mut().enumerate() {
            let ws = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for (xv, wv) in xs.iter().zip(ws) {
                acc += xv * wv;
            }
            *ov = acc;
        }
    }
}

pub fn dense_backward(
    d_out: &[f32],
    x: &[f32],
    w: &[f32],
    d_x: &mut [f32],
    d_w: &mut [f32],
    d_b: &mut [f32],
    batch: usize,
    n_in: usize,
    n_out: usize,
) {
    for s in 0..batch {
        let g = &d_out[s * n_out..(s + 1) * n_out];
        let xs = &x[s * n_in..(s + 1) * n_in];
        let dxs = &mut d_x[s * n_in..(s + 1) * n_in];
        for (o, &go) in g.iter().enumerate() {
            d_b[o] += go;
            if go == 0.0 {
                continue;
            }
            let ws = &w[o * n_in..(o + 1) * n_in];
            let dws = &mut d_w[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                dxs[i] += go * ws[i];
                dws[i] += go * xs[i];
            }
        }
    }
}

/// Spatial size of a conv/pool output along one axis, if it divides evenly.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return None;
    }
    let span = padded - k;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Cross-correlation with stride and zero padding.
/// x: [batch, c_in, h, w], kernel: [c_out, c_in, k, k], out: [batch, c_out, h_out, w_out]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f32],
    kernel: &[f32],
    bias: &[f32],
    out: &mut [f32],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) {
    let x_plane = h * w;
    let o_plane = h_out * w_out;
    for s in 0..batch {
        let xs = &x[s * c_in * x_plane..(s + 1) * c_in * x_plane];
        let os = &mut out[s * c_out * o_plane..(s + 1) * c_out * o_plane];
        for co in 0..c_out {
            let o_chan = &mut os[co * o_plane..(co + 1) * o_plane];
            o_chan.fill(bias[co]);
            for ci in 0..c_in {
                let x_chan = &xs[ci * x_plane..(ci + 1) * x_plane];
                let k_base = (co * c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = kernel[k_base + ky * k + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for oy in 0..h_out {
                            let iy = oy * stride + ky;
                            if iy < padding || iy >= h + padding {
                                continue;
                            }
                            let iy = iy - padding;
                            let x_row = &x_chan[iy * w..(iy + 1) * w];
                            let o_row = &mut o_chan[oy * w_out..(oy + 1) * w_out];
                            for (ox, ov) in o_row.iter_mut().enumerate() {
                                let ix = ox * stride + kx;
                                if ix < padding || ix >= w + padding {
                                    continue;
                                }
                                *ov += kv * x_row[ix - padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    d_out: &[f32],
    x: &[f32],
    kernel: &[f32],
    d_x: &mut [f32],
    d_kernel: &mut [f32],
    d_bias: &mut [f32],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
) {
    let x_plane = h * w;
    let o_plane = h_out * w_out;
    for s in 0..batch {
        let xs = &x[s * c_in * x_plane..(s + 1) * c_in * x_plane];
        let dxs = &mut d_x[s * c_in * x_plane..(s + 1) * c_in * x_plane];
        let gs = &d_out[s * c_out * o_plane..(s + 1) * c_out * o_plane];
        for co in 0..c_out {
            let g_chan = &gs[co * o_plane..(co + 1) * o_plane];
            d_bias[co] += g_chan.iter().sum::<f32>();
            for ci in 0..c_in {
                let x_chan = &xs[ci * x_plane..(ci + 1) * x_plane];
                let dx_chan = &mut dxs[ci * x_plane..(ci + 1) * x_plane];
                let k_base = (co * c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = kernel[k_base + ky * k + kx];
                        let mut dk = 0.0f32;
                        for oy in 0..h_out {
                            let iy = oy * stride + ky;
                            if iy < padding || iy >= h + padding {
                                continue;
                            }
                            let iy = iy - padding;
                            let g_row = &g_chan[oy * w_out..(oy + 1) * w_out];
                            for (ox, &gv) in g_row.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let ix = ox * stride + kx;
                                if ix < padding || ix >= w + padding {
                                    continue;
                                }
                                let ix = ix - padding;
                                dk += gv * x_chan[iy * w + ix];
                                dx_chan[iy * w + ix] += gv * kv;
                            }
                        }
                        d_kernel[k_base + ky * k + kx] += dk;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling (window = stride = size). Records the flat
/// argmax per output cell for the backward scatter.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward(
    x: &[f32],
    out: &mut [f32],
    argmax: &mut [u32],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    size: usize,
    h_out: usize,
    w_out: usize,
) {
    let x_plane = h * w;
    let o_plane = h_out * w_out;
    for s in 0..batch {
        for c in 0..channels {
            let x_chan = &x[(s * channels + c) * x_plane..(s * channels + c + 1) * x_plane];
            let base_out = (s * channels + c) * o_plane;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = (oy * size + dy) * w + ox * size + dx;
                            if x_chan[idx] > best {
                                best = x_chan[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[base_out + oy * w_out + ox] = best;
                    argmax[base_out + oy * w_out + ox] =
                        ((s * channels + c) * x_plane + best_idx) as u32;
                }
            }
        }
    }
}

pub fn maxpool_backward(d_out: &[f32], argmax: &[u32], d_x: &mut [f32]) {
    for (gv, &src) in d_out.iter().zip(argmax) {
        d_x[src as usize] += gv;
    }
}

pub fn activation_forward(x: &[f32], out: &mut [f32], kind: ActKind, alpha: f32, beta: f32) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = activations::eval(kind, v, alpha, beta);
    }
}

/// Accumulates input gradient; returns the scalar gradient w.r.t. alpha.
pub fn activation_backward(
    d_out: &[f32],
    x: &[f32],
    d_x: &mut [f32],
    kind: ActKind,
    alpha: f32,
    beta: f32,
) -> f32 {
    let (a, b) = (alpha as f64, beta as f64);
    let mut d_alpha = 0.0f64;
    for ((dx, &g), &v) in d_x.iter_mut().zip(d_out).zip(x) {
        let xv = v as f64;
        *dx += (g as f64 * activations::dx64(kind, xv, a, b)) as f32;
        d_alpha += g as f64 * activations::dalpha64(kind, xv, b);
    }
    d_alpha as f32
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f32], out: &mut [f32], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for (ov, &v) in o.iter_mut().zip(row) {
            let e = (v - m).exp();
            *ov = e;
            denom += e;
        }
        for ov in o.iter_mut() {
            *ov /= denom;
        }
    }
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn cross_entropy_forward(logits: &[f32], labels: &[u32], batch: usize, classes: usize) -> f32 {
    let mut total = 0.0f64;
    for s in 0..batch {
        let row = &logits[s * classes..(s + 1) * classes];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse: f32 = row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln() + m;
        total += (lse - row[labels[s] as usize]) as f64;
    }
    (total / batch as f64) as f32
}

/// d loss / d logits = (softmax - onehot) / batch, scaled by the upstream grad.
pub fn cross_entropy_backward(
    logits: &[f32],
    labels: &[u32],
    upstream: f32,
    d_logits: &mut [f32],
    batch: usize,
    classes: usize,
) {
    let scale = upstream / batch as f32;
    let mut probs = vec![0.0f32; batch * classes];
    softmax_rows(logits, &mut probs, batch, classes);
    for s in 0..batch {
        for c in 0..classes {
            let onehot = if labels[s] as usize == c { 1.0 } else { 0.0 };
            d_logits[s * classes + c] += scale * (probs[s * classes + c] - onehot);
        }
    }
}
