//! Mini-batch SGD training and the two evaluation metrics.

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::SgdState;
use crate::rng::Rng;
use crate::tape::GradTape;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Strength of the linearity regularizer; 0 disables it.
    pub lambda: f32,
    /// Activation layer indices whose alpha enters the regularizer.
    pub regularized_layers: Vec<usize>,
    pub shuffle_seed: u64,
    /// Global-norm gradient clip; None disables.
    pub max_grad_norm: Option<f32>,
}

pub const DEFAULT_MAX_GRAD_NORM: f32 = 5.0;

/// Loss decomposition for one optimizer step: total = ce + lambda * penalty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f32,
    pub ce: f32,
    pub penalty: f32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_total: f32,
    pub mean_ce: f32,
    pub mean_penalty: f32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
}

/// One forward/backward/update step on a single batch.
pub fn train_step(
    model: &mut Model,
    images: &crate::tensor::Tensor,
    labels: &[u32],
    lambda: f32,
    regularized_layers: &[usize],
    state: &mut SgdState,
) -> Result<StepLoss> {
    train_step_clipped(model, images, labels, lambda, regularized_layers, state, None)
}

/// `train_step` with optional global-norm gradient clipping. The ramp to a
/// linear activation can spike gradients for a few steps; clipping keeps the
/// fine-tune from blowing up there.
#[allow(clippy::too_many_arguments)]
pub fn train_step_clipped(
    model: &mut Model,
    images: &crate::tensor::Tensor,
    labels: &[u32],
    lambda: f32,
    regularized_layers: &[usize],
    state: &mut SgdState,
    max_grad_norm: Option<f32>,
) -> Result<StepLoss> {
    let mut tape = GradTape::new();
    let (logits, bindings) = model.forward_on_tape(&mut tape, images)?;
    let ce = tape.cross_entropy(logits, labels)?;

    let alpha_bufs: Vec<_> = bindings
        .iter()
        .filter(|b| {
            b.role == crate::model::ParamRole::Alpha && regularized_layers.contains(&b.layer)
        })
        .map(|b| (b.buf, b.act_kind.expect("alpha binding carries its kind")))
        .collect();

    let (loss, penalty_value) = if lambda != 0.0 && !alpha_bufs.is_empty() {
        let penalty = tape.alpha_penalty(&alpha_bufs);
        let scaled = tape.scale(penalty, lambda);
        (tape.add(ce, scaled)?, tape.value(penalty)[0])
    } else {
        (ce, 0.0)
    };

    let step = StepLoss { total: tape.value(loss)[0], ce: tape.value(ce)[0], penalty: penalty_value };
    if !step.total.is_finite() {
        return Err(Error::Training(format!("non-finite loss {}", step.total)));
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = bindings.iter().map(|b| tape.grad(b.buf)).collect();
    if let Some(max_norm) = max_grad_norm {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt() as f32;
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    for (slot, (binding, grad)) in bindings.iter().zip(&grads).enumerate() {
        let slice = model.param_slice_mut(binding.layer, binding.role);
        state.step(slot, &binding.name, slice, grad)?;
        // prelu slopes are direct parameters: project back into [0,1] so the
        // clamp never leaves them stranded in a zero-gradient zone
        if binding.act_kind == Some(crate::activations::ActKind::Prelu) {
            slice[0] = slice[0].clamp(0.0, 1.0);
        }
    }
    Ok(step)
}

/// Seeded mini-batch training. Each epoch reshuffles from a stream derived
/// from (shuffle_seed, epoch), so the whole trajectory replays bit-identically.
pub fn train(model: &mut Model, set: &LabeledImageSet, settings: &TrainSettings) -> Result<TrainStats> {
    if set.is_empty() {
        return Err(Error::Data("train: empty dataset".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Data("train: batch size must be positive".into()));
    }
    let mut state = SgdState::new(settings.learning_rate, settings.momentum);
    let mut stats = TrainStats::default();
    let n = set.len();
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::split(settings.shuffle_seed, 0xE00Cu64.wrapping_add(epoch as u64));
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let (images, labels) = set.batch(chunk);
            let step = train_step_clipped(
                model,
                &images,
                &labels,
                settings.lambda,
                &settings.regularized_layers,
                &mut state,
                settings.max_grad_norm,
            )?;
            sums.0 += step.total as f64;
            sums.1 += step.ce as f64;
            sums.2 += step.penalty as f64;
            batches += 1;
        }
        stats.epochs.push(EpochStats {
            mean_total: (sums.0 / batches as f64) as f32,
            mean_ce: (sums.1 / batches as f64) as f32,
            mean_penalty: (sums.2 / batches as f64) as f32,
        });
    }
    Ok(stats)
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy on clean samples.
pub fn test_accuracy(model: &Model, set: &LabeledImageSet) -> Result<f32> {
    if set.is_empty() {
        return Err(Error::Metric("test_accuracy: empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (images, labels) = set.batch(chunk);
        let preds = model.predict(&images)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f32 / set.len() as f32)
}

/// Fraction of triggered samples classified as the target label. Samples
/// whose true class is already the target never enter the denominator.
pub fn attack_success_rate(model: &Model, triggered: &LabeledImageSet, target: u32) -> Result<f32> {
    let eligible: Vec<usize> =
        (0..triggered.len()).filter(|&i| triggered.labels[i] != target).collect();
    if eligible.is_empty() {
        return Err(Error::Metric("attack_success_rate: no eligible samples".into()));
    }
    let mut hits = 0usize;
    for chunk in eligible.chunks(EVAL_CHUNK) {
        let (images, _) = triggered.batch(chunk);
        let preds = model.predict(&images)?;
        hits += preds.iter().filter(|&&p| p == target).count();
    }
    Ok(hits as f32 / eligible.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActKind;
    use crate::data::synth_shapes;
    use crate::model::build_arch;
    use crate::tensor::Tensor;

    #[test]
    fn loss_decomposes_exactly() {
        let mut rng = Rng::new(11);
        let mut model = build_arch("mlp-8", &[1, 6, 6], 3, ActKind::Prelu, &mut rng).unwrap();
        let x = Tensor::uniform(vec![4, 1, 6, 6], 0.0, 1.0, &mut rng);
        let labels = [0u32, 1, 2, 0];
        let mut state = SgdState::new(0.01, 0.0);
        let reg = vec![2usize]; // the hidden activation layer
        let step = train_step(&mut model, &x, &labels, 1.5, &reg, &mut state).unwrap();
        assert!((step.total - (step.ce + 1.5 * step.penalty)).abs() <= 1e-5);
        assert!(step.penalty > 0.0);
    }

    #[test]
    fn training_reduces_loss_on_tiny_task() {
        let set = synth_shapes(120, 3, 12, 12, 13).unwrap();
        let mut rng = Rng::new(13);
        let mut model = build_arch("mlp-16", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let settings = TrainSettings {
            epochs: 6,
            batch_size: 30,
            learning_rate: 0.1,
            momentum: 0.9,
            lambda: 0.0,
            regularized_layers: vec![],
            shuffle_seed: 13,
            max_grad_norm: Some(crate::train::DEFAULT_MAX_GRAD_NORM),
        };
        let stats = train(&mut model, &set, &settings).unwrap();
        let first = stats.epochs.first().unwrap().mean_total;
        let last = stats.epochs.last().unwrap().mean_total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let set = synth_shapes(60, 3, 10, 10, 21).unwrap();
        let run = || {
            let mut rng = Rng::new(21);
            let mut model = build_arch("mlp-8", &[1, 10, 10], 3, ActKind::Silu, &mut rng).unwrap();
            let settings = TrainSettings {
                epochs: 3,
                batch_size: 16,
                learning_rate: 0.05,
                momentum: 0.9,
                lambda: 0.5,
                regularized_layers: vec![2],
                shuffle_seed: 21,
            max_grad_norm: Some(crate::train::DEFAULT_MAX_GRAD_NORM),
            };
            train(&mut model, &set, &settings).unwrap();
            let mut out = Vec::new();
            model.visit_params(&mut |_, p| out.extend_from_slice(p));
            out
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn metric_hand_counts() {
        // constant-class model on a tiny set
        let set = synth_shapes(40, 4, 12, 12, 3).unwrap();
        let mut rng = Rng::new(3);
        let model = build_arch("mlp-4", &[1, 12, 12], 4, ActKind::Prelu, &mut rng).unwrap();
        let acc = test_accuracy(&model, &set).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let asr = attack_success_rate(&model, &set, 0).unwrap();
        assert!((0.0..=1.0).contains(&asr));
    }

    #[test]
    fn asr_counting_three_samples() {
        // predictions [target, other, target] over 3 eligible -> 2/3
        // build a set the model classifies deterministically by training on it
        let set = synth_shapes(90, 3, 12, 12, 5).unwrap();
        let mut rng = Rng::new(5);
        let mut model = build_arch("mlp-16", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let settings = TrainSettings {
            epochs: 10,
            batch_size: 30,
            learning_rate: 0.2,
            momentum: 0.9,
            lambda: 0.0,
            regularized_layers: vec![],
            shuffle_seed: 5,
            max_grad_norm: Some(crate::train::DEFAULT_MAX_GRAD_NORM),
        };
        train(&mut model, &set, &settings).unwrap();
        // trained model ignores any trigger talk: ASR toward class 0 equals
        // the fraction of non-0 samples it happens to call 0
        let preds = model.predict(&set.images).unwrap();
        let eligible: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] != 0).collect();
        let want = eligible.iter().filter(|&&i| preds[i] == 0).count() as f32 / eligible.len() as f32;
        let got = attack_success_rate(&model, &set, 0).unwrap();
        assert!((got - want).abs() < 1e-6);
    }
}
