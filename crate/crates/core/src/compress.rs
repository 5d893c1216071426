//! Weight-count compression ratios for fused blocks.
//!
//! Ratios are weight-only (biases excluded): fusing an n_in -> n_hidden ->
//! n_out pair replaces n_hidden*(n_in+n_out) weights with n_in*n_out, so
//!
//!   CR = 1 - n_in*n_out / (n_hidden*(n_in+n_out))
//!
//! and analogously for conv with k^2-scaled channel products. Negative
//! values mean the fused layer is larger than the pair it replaces
//! (bottleneck shapes).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressionSpec {
    Dense { n_in: usize, n_hidden: usize, n_out: usize },
    Conv { k1: usize, k2: usize, c_in: usize, c_hidden: usize, c_out: usize },
}

impl CompressionSpec {
    fn check_positive(&self) -> Result<()> {
        let ok = match *self {
            CompressionSpec::Dense { n_in, n_hidden, n_out } => {
                n_in > 0 && n_hidden > 0 && n_out > 0
            }
            CompressionSpec::Conv { k1, k2, c_in, c_hidden, c_out } => {
                k1 > 0 && k2 > 0 && c_in > 0 && c_hidden > 0 && c_out > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Accounting(format!("compression spec entries must be positive: {self:?}")))
        }
    }
}

pub fn compression_ratio_dense(spec: &CompressionSpec) -> Result<f64> {
    spec.check_positive()?;
    let CompressionSpec::Dense { n_in, n_hidden, n_out } = *spec else {
        return Err(Error::Accounting("compression_ratio_dense needs a dense spec".into()));
    };
    let merged = (n_in * n_out) as f64;
    let original = (n_hidden * (n_in + n_out)) as f64;
    Ok(1.0 - merged / original)
}

pub fn compression_ratio_conv(spec: &CompressionSpec) -> Result<f64> {
    spec.check_positive()?;
    let CompressionSpec::Conv { k1, k2, c_in, c_hidden, c_out } = *spec else {
        return Err(Error::Accounting("compression_ratio_conv needs a conv spec".into()));
    };
    let k = k1 + k2 - 1;
    let original = (k1 * k1 * c_in * c_hidden + k2 * k2 * c_hidden * c_out) as f64;
    let merged = (k * k * c_in * c_out) as f64;
    Ok(1.0 - original / merged)
}
