//! Parametric activations with a trainable linearity coefficient.
//!
//! Each kind blends its base nonlinearity (alpha = 0) with the identity
//! (alpha = 1):
//!
//!   prelu:  max(0,x) + alpha*min(0,x)
//!   elu:    x for x>0, else alpha*x + (1-alpha)*beta*(exp(x)-1)
//!   gelu:   x*(Phi(x) + alpha*(1-Phi(x)))
//!   silu:   x*(sigma(x) + alpha*(1-sigma(x)))
//!
//! During training alpha lives behind a logistic squash of a raw parameter,
//! so alpha stays inside (0,1) no matter what the optimizer does to raw.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Prelu,
    Elu,
    Gelu,
    Silu,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Prelu => "prelu",
            ActKind::Elu => "elu",
            ActKind::Gelu => "gelu",
            ActKind::Silu => "silu",
        }
    }
}

impl std::str::FromStr for ActKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prelu" => Ok(ActKind::Prelu),
            "elu" => Ok(ActKind::Elu),
            "gelu" => Ok(ActKind::Gelu),
            "silu" => Ok(ActKind::Silu),
            other => Err(format!("unknown activation kind: {other}")),
        }
    }
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| <= 1.5e-7.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Standard normal PDF.
fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Numerically stable logistic.
pub fn logistic64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map a raw trainable parameter into the open interval (0,1).
pub fn clamp_alpha(raw_alpha: f32) -> f32 {
    logistic64(raw_alpha as f64) as f32
}

/// Inverse of `clamp_alpha`; used to pick raw initializations.
pub fn clamp_alpha_inv(alpha: f32) -> f32 {
    let a = (alpha as f64).clamp(1e-12, 1.0 - 1e-12);
    (a / (1.0 - a)).ln() as f32
}

/// Scalar forward in f64. The single source of truth for the blend formulas.
pub fn eval64(kind: ActKind, x: f64, alpha: f64, beta: f64) -> f64 {
    match kind {
        ActKind::Prelu => x.max(0.0) + alpha * x.min(0.0),
        ActKind::Elu => {
            if x > 0.0 {
                x
            } else {
                alpha * x + (1.0 - alpha) * beta * (x.exp() - 1.0)
            }
        }
        ActKind::Gelu => {
            let p = phi(x);
            x * (p + alpha * (1.0 - p))
        }
        ActKind::Silu => {
            let s = logistic64(x);
            x * (s + alpha * (1.0 - s))
        }
    }
}

/// d f / d x in f64.
pub fn dx64(kind: ActKind, x: f64, alpha: f64, beta: f64) -> f64 {
    match kind {
        ActKind::Prelu => {
            if x > 0.0 {
                1.0
            } else {
                alpha
            }
        }
        ActKind::Elu => {
            if x > 0.0 {
                1.0
            } else {
                alpha + (1.0 - alpha) * beta * x.exp()
            }
        }
        ActKind::Gelu => {
            let p = phi(x);
            p + alpha * (1.0 - p) + x * (1.0 - alpha) * phi_pdf(x)
        }
        ActKind::Silu => {
            let s = logistic64(x);
            s + alpha * (1.0 - s) + x * (1.0 - alpha) * s * (1.0 - s)
        }
    }
}

/// d f / d alpha in f64.
pub fn dalpha64(kind: ActKind, x: f64, beta: f64) -> f64 {
    match kind {
        ActKind::Prelu => x.min(0.0),
        ActKind::Elu => {
            if x > 0.0 {
                0.0
            } else {
                x - beta * (x.exp() - 1.0)
            }
        }
        ActKind::Gelu => x * (1.0 - phi(x)),
        ActKind::Silu => x * (1.0 - logistic64(x)),
    }
}

pub fn prelu(x: f32, alpha: f32) -> f32 {
    x.max(0.0) + alpha * x.min(0.0)
}

pub fn elu_linearized(x: f32, alpha: f32, beta: f32) -> f32 {
    eval64(ActKind::Elu, x as f64, alpha as f64, beta as f64) as f32
}

pub fn gelu_linearized(x: f32, alpha: f32) -> f32 {
    eval64(ActKind::Gelu, x as f64, alpha as f64, 1.0) as f32
}

pub fn silu_linearized(x: f32, alpha: f32) -> f32 {
    eval64(ActKind::Silu, x as f64, alpha as f64, 1.0) as f32
}

pub fn eval(kind: ActKind, x: f32, alpha: f32, beta: f32) -> f32 {
    match kind {
        // pure f32 so that alpha = 1 reproduces x bit for bit
        ActKind::Prelu => prelu(x, alpha),
        _ => eval64(kind, x as f64, alpha as f64, beta as f64) as f32,
    }
}

/// Elementwise application over a tensor.
pub fn apply(kind: ActKind, x: &Tensor, alpha: f32, beta: f32) -> Tensor {
    let data = x.iter().map(|&v| eval(kind, v, alpha, beta)).collect();
    Tensor::new(x.shape().to_vec(), data)
}
