//! f64 reference forward path.
//!
//! An independent, loop-for-loop reimplementation of the model forward and
//! composite loss in double precision. It exists so gradient checks can take
//! central finite differences against a path that shares no code with the
//! f32 kernels or the tape. Keep it boring; clarity over speed.

use crate::activations::{self, ActKind};
use crate::layers::{AlphaParam, Layer};
use crate::model::Model;

enum ShadowLayer {
    Dense { w: Vec<f64>, b: Vec<f64>, n_in: usize, n_out: usize },
    Conv2d {
        kernel: Vec<f64>,
        bias: Vec<f64>,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    Activation { kind: ActKind, raw: f64, trainable: bool, pinned: f64, beta: f64 },
    MaxPool { size: usize },
    Flatten,
}

pub struct ShadowModel {
    layers: Vec<ShadowLayer>,
    input_shape: Vec<usize>,
    classes: usize,
}

/// raw -> effective alpha; mirrors the f32 parametrization per kind.
fn shadow_alpha(kind: ActKind, raw: f64) -> f64 {
    match kind {
        ActKind::Prelu => raw.clamp(0.0, 1.0),
        _ => activations::logistic64(raw),
    }
}

impl ShadowModel {
    pub fn from_model(m: &Model) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => ShadowLayer::Dense {
                    w: d.w.iter().map(|&v| v as f64).collect(),
                    b: d.b.iter().map(|&v| v as f64).collect(),
                    n_in: d.n_in(),
                    n_out: d.n_out(),
                },
                Layer::Conv2d(c) => ShadowLayer::Conv2d {
                    kernel: c.kernel.iter().map(|&v| v as f64).collect(),
                    bias: c.bias.iter().map(|&v| v as f64).collect(),
                    c_out: c.c_out(),
                    c_in: c.c_in(),
                    k: c.k(),
                    stride: c.stride,
                    padding: c.padding,
                },
                Layer::Activation(a) => match a.alpha {
                    AlphaParam::Trainable(raw) => ShadowLayer::Activation {
                        kind: a.kind,
                        raw: raw as f64,
                        trainable: true,
                        pinned: 0.0,
                        beta: a.beta as f64,
                    },
                    AlphaParam::Pinned(alpha) => ShadowLayer::Activation {
                        kind: a.kind,
                        raw: 0.0,
                        trainable: false,
                        pinned: alpha as f64,
                        beta: a.beta as f64,
                    },
                },
                Layer::MaxPool2d(p) => ShadowLayer::MaxPool { size: p.size },
                Layer::Flatten => ShadowLayer::Flatten,
            })
            .collect();
        ShadowModel { layers, input_shape: m.input_shape.clone(), classes: m.classes }
    }

    /// Number of trainable scalars, in the same order as `Model::visit_params`.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                ShadowLayer::Dense { w, b, .. } => w.len() + b.len(),
                ShadowLayer::Conv2d { kernel, bias, .. } => kernel.len() + bias.len(),
                ShadowLayer::Activation { trainable, .. } => usize::from(*trainable),
                _ => 0,
            })
            .sum()
    }

    /// Mutable access to the i-th trainable scalar (registry order).
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            match l {
                ShadowLayer::Dense { w, b, .. } => {
                    if idx < w.len() {
                        return &mut w[idx];
                    }
                    idx -= w.len();
                    if idx < b.len() {
                        return &mut b[idx];
                    }
                    idx -= b.len();
                }
                ShadowLayer::Conv2d { kernel, bias, .. } => {
                    if idx < kernel.len() {
                        return &mut kernel[idx];
                    }
                    idx -= kernel.len();
                    if idx < bias.len() {
                        return &mut bias[idx];
                    }
                    idx -= bias.len();
                }
                ShadowLayer::Activation { raw, trainable, .. } if *trainable => {
                    if idx == 0 {
                        return raw;
                    }
                    idx -= 1;
                }
                _ => {}
            }
        }
        panic!("shadow parameter index out of range");
    }

    /// Composite loss: mean cross-entropy plus
    /// lambda * sum over `regularized` activation layers of (1-alpha)^2.
    pub fn loss(&self, x: &[f64], batch: usize, labels: &[u32], lambda: f64, regularized: &[usize]) -> f64 {
        let logits = self.forward(x, batch);
        let classes = self.classes;
        let mut total = 0.0;
        for s in 0..batch {
            let row = &logits[s * classes..(s + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[labels[s] as usize];
        }
        let mut loss = total / batch as f64;
        for &li in regularized {
            if let ShadowLayer::Activation { kind, raw, trainable: true, .. } = &self.layers[li] {
                let a = shadow_alpha(*kind, *raw);
                loss += lambda * (1.0 - a) * (1.0 - a);
            }
        }
        loss
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            match l {
                ShadowLayer::Dense { w, b, n_in, n_out } => {
                    let mut out = vec![0.0; batch * n_out];
                    for s in 0..batch {
                        for o in 0..*n_out {
                            let mut acc = b[o];
                            for i in 0..*n_in {
                                acc += cur[s * n_in + i] * w[o * n_in + i];
                            }
                            out[s * n_out + o] = acc;
                        }
                    }
                    cur = out;
                    shape = vec![*n_out];
                }
                ShadowLayer::Conv2d { kernel, bias, c_out, c_in, k, stride, padding } => {
                    let (h, w) = (shape[1], shape[2]);
                    let h_out = (h + 2 * padding - k) / stride + 1;
                    let w_out = (w + 2 * padding - k) / stride + 1;
                    let mut out = vec![0.0; batch * c_out * h_out * w_out];
                    for s in 0..batch {
                        for co in 0..*c_out {
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let mut acc = bias[co];
                                    for ci in 0..*c_in {
                                        for ky in 0..*k {
                                            for kx in 0..*k {
                                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                                let ix = (ox * stride + kx) as isize - *padding as isize;
                                                if iy < 0
                                                    || ix < 0
                                                    || iy >= h as isize
                                                    || ix >= w as isize
                                                {
                                                    continue;
                                                }
                                                acc += cur[((s * c_in + ci) * h + iy as usize) * w
                                                    + ix as usize]
                                                    * kernel[((co * c_in + ci) * k + ky) * k + kx];
                                            }
                                        }
                                    }
                                    out[((s * c_out + co) * h_out + oy) * w_out + ox] = acc;
                                }
                            }
                        }
                    }
                    cur = out;
                    shape = vec![*c_out, h_out, w_out];
                }
                ShadowLayer::Activation { kind, raw, trainable, pinned, beta } => {
                    let alpha = if *trainable { shadow_alpha(*kind, *raw) } else { *pinned };
                    for v in cur.iter_mut() {
                        *v = activations::eval64(*kind, *v, alpha, *beta);
                    }
                }
                ShadowLayer::MaxPool { size } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (h_out, w_out) = (h / size, w / size);
                    let mut out = vec![0.0; batch * c * h_out * w_out];
                    for s in 0..batch {
                        for ch in 0..c {
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let mut best = f64::NEG_INFINITY;
                                    for dy in 0..*size {
                                        for dx in 0..*size {
                                            let v = cur[((s * c + ch) * h + oy * size + dy) * w
                                                + ox * size
                                                + dx];
                                            if v > best {
                                                best = v;
                                            }
                                        }
                                    }
                                    out[((s * c + ch) * h_out + oy) * w_out + ox] = best;
                                }
                            }
                        }
                    }
                    cur = out;
                    shape = vec![c, h_out, w_out];
                }
                ShadowLayer::Flatten => {
                    shape = vec![shape.iter().product()];
                }
            }
        }
        cur
    }
}
