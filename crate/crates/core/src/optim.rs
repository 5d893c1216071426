//! SGD with classic momentum.

use crate::error::{Error, Result};

/// Optimizer state: one velocity buffer per parameter, created lazily in
/// the order parameters are first stepped.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(learning_rate: f32, momentum: f32) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        SgdState { learning_rate, momentum, velocity: Vec::new() }
    }

    /// v <- momentum*v + g ; p <- p - lr*v  for the parameter at `slot`.
    ///
    /// Slots index a fixed parameter ordering chosen by the caller (the
    /// trainer walks the model in layer order). A non-finite gradient aborts
    /// with the parameter name before any update is applied.
    pub fn step(&mut self, slot: usize, name: &str, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::Shape(format!(
                "sgd_step {name}: gradient length {} vs parameter length {}",
                grad.len(),
                param.len()
            )));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {bad} for parameter {name}"
            )));
        }
        while self.velocity.len() <= slot {
            self.velocity.push(Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.is_empty() {
            v.resize(param.len(), 0.0);
        }
        debug_assert_eq!(v.len(), param.len(), "velocity shape drifted for {name}");
        for ((vi, pi), gi) in v.iter_mut().zip(param.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + gi;
            *pi -= self.learning_rate * *vi;
        }
        Ok(())
    }
}
