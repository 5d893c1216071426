//! Classification loss, tape-free entry points.

use crate::error::{Error, Result};
use crate::linalg::dims2;
use crate::ops;
use crate::tensor::Tensor;

/// Mean negative log-likelihood over the batch, stabilized by max subtraction.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<f32> {
    let (batch, classes) = dims2(logits, "cross_entropy logits")?;
    if labels.len() != batch {
        return Err(Error::Data(format!(
            "cross_entropy: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Data(format!(
            "cross_entropy: label {bad} out of range for {classes} classes"
        )));
    }
    Ok(ops::cross_entropy_forward(logits.data(), labels, batch, classes))
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = dims2(logits, "softmax")?;
    let mut out = vec![0.0; rows * cols];
    ops::softmax_rows(logits.data(), &mut out, rows, cols);
    Ok(Tensor::new(vec![rows, cols], out))
}
