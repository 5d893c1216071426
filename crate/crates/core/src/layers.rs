//! Layer records: two linear families (dense, conv2d), parametric
//! activations, and the non-mergeable plumbing (pooling, flatten).

use crate::activations::{clamp_alpha, clamp_alpha_inv, ActKind};
use crate::error::{Error, Result};
use crate::ops::conv_out_dim;
use crate::tensor::Tensor;

/// Fully connected layer. Weight is stored out x in.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseLayer {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        let rows = match w.shape() {
            [r, _] => *r,
            other => return Err(Error::Shape(format!("dense weight must be 2-d, got {other:?}"))),
        };
        if b.len() != rows {
            return Err(Error::Shape(format!(
                "dense bias length {} does not match {} output rows",
                b.len(),
                rows
            )));
        }
        Ok(DenseLayer { w, b })
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[1]
    }
}

/// Square-kernel 2-d convolution (cross-correlation convention).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub kernel: Tensor, // [c_out, c_in, k, k]
    pub bias: Tensor,   // [c_out]
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, k) = match kernel.shape() {
            [co, _, kh, kw] if kh == kw => (*co, *kh),
            other => {
                return Err(Error::Shape(format!(
                    "conv kernel must be square [c_out,c_in,k,k], got {other:?}"
                )))
            }
        };
        if bias.len() != c_out {
            return Err(Error::Shape(format!(
                "conv bias length {} does not match {} output channels",
                bias.len(),
                c_out
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        let _ = k;
        Ok(Conv2dLayer { kernel, bias, stride, padding })
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// The linearity coefficient of a parametric activation.
///
/// While trainable it is a raw scalar mapped into [0,1]: PReLU's slope is
/// the raw value itself, hard-clamped (its regularizer gradient must not
/// vanish as alpha approaches 1, or the merge threshold is never reached
/// inside a short fine-tune); the smooth kinds squash through the logistic.
/// Finalization may pin alpha, typically to exactly 0 (base activation) or
/// exactly 1 (identity, ready to merge).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaParam {
    Trainable(f32),
    Pinned(f32),
}

impl AlphaParam {
    pub fn is_trainable(self) -> bool {
        matches!(self, AlphaParam::Trainable(_))
    }
}

/// raw -> effective alpha for a trainable parameter of the given kind.
pub fn effective_alpha_of(kind: ActKind, raw: f32) -> f32 {
    match kind {
        ActKind::Prelu => raw.clamp(0.0, 1.0),
        _ => clamp_alpha(raw),
    }
}

/// d effective / d raw at the current raw value.
pub fn alpha_chain_grad(kind: ActKind, raw: f32) -> f32 {
    match kind {
        ActKind::Prelu => {
            if (0.0..=1.0).contains(&raw) {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            let a = clamp_alpha(raw);
            a * (1.0 - a)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParametricActivation {
    pub kind: ActKind,
    pub alpha: AlphaParam,
    /// ELU shape parameter; fixed, ignored by the other kinds.
    pub beta: f32,
}

impl ParametricActivation {
    /// Trainable activation starting at the given effective alpha.
    pub fn trainable(kind: ActKind, alpha0: f32) -> Self {
        let raw = match kind {
            ActKind::Prelu => alpha0.clamp(0.0, 1.0),
            _ => clamp_alpha_inv(alpha0),
        };
        ParametricActivation { kind, alpha: AlphaParam::Trainable(raw), beta: 1.0 }
    }

    pub fn pinned(kind: ActKind, alpha: f32) -> Self {
        ParametricActivation { kind, alpha: AlphaParam::Pinned(alpha), beta: 1.0 }
    }

    /// Plain ReLU: PReLU pinned at the base activation.
    pub fn relu() -> Self {
        Self::pinned(ActKind::Prelu, 0.0)
    }

    pub fn effective_alpha(&self) -> f32 {
        match self.alpha {
            AlphaParam::Trainable(raw) => effective_alpha_of(self.kind, raw),
            AlphaParam::Pinned(a) => a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    Activation(ParametricActivation),
    MaxPool2d(MaxPool2d),
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Activation(_) => "activation",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::Flatten => "flatten",
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != d.n_in() {
                    return Err(Error::Shape(format!(
                        "dense expects [{}], got {input:?}",
                        d.n_in()
                    )));
                }
                Ok(vec![d.n_out()])
            }
            Layer::Conv2d(c) => {
                let (ci, h, w) = match input {
                    [ci, h, w] => (*ci, *h, *w),
                    other => {
                        return Err(Error::Shape(format!("conv expects [c,h,w], got {other:?}")))
                    }
                };
                if ci != c.c_in() {
                    return Err(Error::Shape(format!(
                        "conv expects {} input channels, got {ci}",
                        c.c_in()
                    )));
                }
                let ho = conv_out_dim(h, c.k(), c.stride, c.padding).ok_or_else(|| {
                    Error::Shape(format!(
                        "conv output height not integral: h={h} k={} s={} p={}",
                        c.k(),
                        c.stride,
                        c.padding
                    ))
                })?;
                let wo = conv_out_dim(w, c.k(), c.stride, c.padding).ok_or_else(|| {
                    Error::Shape(format!(
                        "conv output width not integral: w={w} k={} s={} p={}",
                        c.k(),
                        c.stride,
                        c.padding
                    ))
                })?;
                Ok(vec![c.c_out(), ho, wo])
            }
            Layer::Activation(_) => Ok(input.to_vec()),
            Layer::MaxPool2d(p) => match input {
                [c, h, w] if h % p.size == 0 && w % p.size == 0 => {
                    Ok(vec![*c, h / p.size, w / p.size])
                }
                other => Err(Error::Shape(format!(
                    "maxpool {0}x{0} cannot tile input {other:?}",
                    p.size
                ))),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}
