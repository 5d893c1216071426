//! Probabilistic non-linearity error bound and its empirical audit.
//!
//! For a dense block the gap between the fused-linear output and the
//! actual output is tested against C*(1-alpha)^2 where
//!
//!   C = sigma_max(W2 W1)^2 * |x_delta|^2 + |W2 b1|^2
//!
//! and x_delta is the empirical quantile radius of the input norms. The
//! audit reports the observed violation rate instead of asserting the
//! inequality: in general the bound can fail (sigma_max(W2 W1) can be far
//! below sigma_max(W2)*sigma_max(W1), and a nonzero b1 shifts where the
//! negative branch fires), so only the defender-facing rate is promised.

use crate::error::{Error, Result};
use crate::linalg::{matmul, sigma_max};
use crate::merge::{linearity_gap, BlockLayers, MergeableBlock};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub x_delta: f64,
    pub c: f64,
    pub alpha: f64,
    pub empirical_violation_rate: f64,
    pub sample_count: usize,
}

/// Smallest sample norm r such that at most a delta fraction of the sample
/// norms is strictly larger than r. Deterministic given the samples.
pub fn quantile_radius(samples: &[Tensor], delta: f64) -> Result<f32> {
    if samples.is_empty() {
        return Err(Error::Data("quantile_radius: no samples".into()));
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::Data(format!("quantile_radius: delta {delta} outside (0,1)")));
    }
    let mut norms: Vec<f64> = samples
        .iter()
        .map(|t| t.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = norms.len();
    let budget = delta * n as f64;
    for i in 0..n {
        // strict upper count for value norms[i]
        let mut j = i;
        while j + 1 < n && norms[j + 1] <= norms[i] {
            j += 1;
        }
        let strictly_larger = (n - j - 1) as f64;
        if strictly_larger <= budget {
            return Ok(norms[i] as f32);
        }
    }
    Ok(norms[n - 1] as f32)
}

/// C = sigma_max(W2 W1)^2 * x_delta^2 + |W2 b1|^2.
pub fn error_bound_c(w1: &Tensor, b1: &Tensor, w2: &Tensor, x_delta: f32) -> Result<f32> {
    let product = matmul(w2, w1)?;
    let smax = sigma_max(&product)? as f64;
    let (n_out, n_hidden) = (w2.shape()[0], w2.shape()[1]);
    if b1.len() != n_hidden {
        return Err(Error::Shape(format!(
            "error_bound_c: b1 length {} vs {} hidden units",
            b1.len(),
            n_hidden
        )));
    }
    let mut w2b1_sq = 0.0f64;
    for o in 0..n_out {
        let mut acc = 0.0f64;
        for h in 0..n_hidden {
            acc += w2.data()[o * n_hidden + h] as f64 * b1.data()[h] as f64;
        }
        w2b1_sq += acc * acc;
    }
    Ok((smax * smax * (x_delta as f64) * (x_delta as f64) + w2b1_sq) as f32)
}

/// Evaluate the bound event per sample and report the violation rate.
pub fn audit_bound(block: &MergeableBlock, samples: &[Tensor], delta: f64) -> Result<BoundReport> {
    if samples.len() < 100 {
        return Err(Error::Data(format!(
            "audit_bound: need at least 100 samples, got {}",
            samples.len()
        )));
    }
    let BlockLayers::Dense { first, second } = &block.layers else {
        return Err(Error::Merge("audit_bound is defined for dense blocks".into()));
    };
    let x_delta = quantile_radius(samples, delta)?;
    let c = error_bound_c(&first.w, &first.b, &second.w, x_delta)? as f64;
    let alpha = block.activation.effective_alpha() as f64;
    let rhs = c * (1.0 - alpha) * (1.0 - alpha);
    let mut violations = 0usize;
    for x in samples {
        let (_, gap_sq) = linearity_gap(block, x)?;
        if gap_sq as f64 > rhs {
            violations += 1;
        }
    }
    Ok(BoundReport {
        delta,
        x_delta: x_delta as f64,
        c,
        alpha,
        empirical_violation_rate: violations as f64 / samples.len() as f64,
        sample_count: samples.len(),
    })
}
