//! The cleansing procedures: regularized linearize-and-merge, and the
//! plain fine-tuning baseline.
//!
//! mergeguard_defend:
//!   1. pick the last k mergeable blocks
//!   2. make their activations trainable (base activations start at
//!      alpha ~ 0 so the wrapped model is functionally unchanged)
//!   3. fine-tune on the benign subset minimizing CE + lambda*sum (1-a_i)^2
//!   4. snap alphas at or above the threshold to exactly 1 and fuse those
//!      blocks; blocks that stayed non-linear are left alone
//!   5. re-evaluate and account

use crate::accounting::{count_macs, count_params};

use crate::compress::{compression_ratio_dense, CompressionSpec};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::layers::{AlphaParam, Layer, ParametricActivation};
use crate::merge::{find_mergeable_blocks, fuse_in_model};
use crate::model::Model;
use crate::train::{attack_success_rate, test_accuracy, train, TrainSettings, TrainStats};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseMethod {
    Mergeguard,
    Ft,
}

impl DefenseMethod {
    pub fn name(self) -> &'static str {
        match self {
            DefenseMethod::Mergeguard => "mergeguard",
            DefenseMethod::Ft => "ft",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub method: DefenseMethod,
    pub benign_fraction: f32,
    pub lambda: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub learning_rate: f32,
    pub k_last_blocks: usize,
    pub alpha_threshold: f32,
    pub seed: u64,
    /// Optional plain fine-tune after merging; 0 keeps the pipeline as-is.
    pub restore_epochs: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            method: DefenseMethod::Mergeguard,
            benign_fraction: 0.05,
            lambda: 1.0,
            epochs: 20,
            batch_size: 128,
            momentum: 0.9,
            learning_rate: 0.1,
            k_last_blocks: 1,
            alpha_threshold: 0.99,
            seed: 0,
            restore_epochs: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.benign_fraction > 0.0 && self.benign_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "benign_fraction {} outside (0,1]",
                self.benign_fraction
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.k_last_blocks == 0 {
            return Err(Error::Config("k_last_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub test_acc: f32,
    /// Absent when the run has no attack configured.
    pub asr: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockOutcome {
    pub block_id: usize,
    pub final_alpha: f32,
    pub merged: bool,
    pub cr_weight_only: Option<f64>,
    pub cr_with_bias: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub attack: String,
    pub method: String,
    pub seed: u64,
    pub trojaned: PhaseMetrics,
    pub defended: PhaseMetrics,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub blocks: Vec<BlockOutcome>,
    pub defense: DefenseConfig,
    pub train_stats: TrainStats,
    /// Echo of the run configuration that produced this report.
    pub config_echo: serde_json::Value,
    /// Measured but not serialized: timing would break byte-for-byte
    /// report reproducibility across runs.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Evaluation data the defense snapshots metrics against.
pub struct EvalContext<'a> {
    pub test: &'a LabeledImageSet,
    /// Trigger-stamped non-target test samples, when an attack is configured.
    pub triggered: Option<&'a LabeledImageSet>,
    pub target_label: Option<u32>,
    pub attack_name: String,
}

impl EvalContext<'_> {
    pub fn measure(&self, model: &Model) -> Result<PhaseMetrics> {
        let test_acc = test_accuracy(model, self.test)?;
        let asr = match (self.triggered, self.target_label) {
            (Some(set), Some(target)) => Some(attack_success_rate(model, set, target)?),
            _ => None,
        };
        Ok(PhaseMetrics { test_acc, asr })
    }
}

/// Indices (into `model.layers`) of the activation layers of the last k
/// mergeable blocks, in model order.
fn select_last_k_blocks(model: &Model, k: usize) -> Result<Vec<usize>> {
    let blocks = find_mergeable_blocks(model);
    if blocks.is_empty() {
        return Err(Error::Defense("model has no mergeable blocks".into()));
    }
    if blocks.len() < k {
        return Err(Error::Defense(format!(
            "model has {} mergeable blocks, defense wants the last {k}",
            blocks.len()
        )));
    }
    Ok(blocks[blocks.len() - k..].iter().map(|b| b.block_id).collect())
}

/// Make the activation of each selected block trainable. A pinned base
/// activation becomes trainable at (or near) its current alpha, so the
/// wrapped model starts functionally unchanged; an already-trainable
/// activation keeps its raw value.
fn wrap_blocks(model: &mut Model, block_ids: &[usize]) {
    for &id in block_ids {
        if let Layer::Activation(act) = &mut model.layers[id + 1] {
            match act.alpha {
                AlphaParam::Pinned(alpha) => {
                    let start = match act.kind {
                        // direct parametrization reaches 0 exactly
                        crate::activations::ActKind::Prelu => alpha.clamp(0.0, 1.0),
                        _ => alpha.clamp(0.01, 0.99),
                    };
                    *act = ParametricActivation::trainable(act.kind, start);
                }
                AlphaParam::Trainable(raw) => {
                    // re-project stale slopes from older checkpoints
                    if act.kind == crate::activations::ActKind::Prelu {
                        act.alpha = AlphaParam::Trainable(raw.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
}

fn block_compression(model: &Model, block_id: usize) -> (Option<f64>, Option<f64>) {
    let (Layer::Dense(first), Layer::Dense(second)) =
        (&model.layers[block_id], &model.layers[block_id + 2])
    else {
        return conv_block_compression(model, block_id);
    };
    let (n_in, n_hidden, n_out) = (first.n_in(), first.n_out(), second.n_out());
    let weight_only = compression_ratio_dense(&CompressionSpec::Dense { n_in, n_hidden, n_out }).ok();
    let orig = (n_hidden * (n_in + 1) + n_out * (n_hidden + 1)) as f64;
    let merged = (n_out * (n_in + 1)) as f64;
    (weight_only, Some(1.0 - merged / orig))
}

fn conv_block_compression(model: &Model, block_id: usize) -> (Option<f64>, Option<f64>) {
    let (Layer::Conv2d(first), Layer::Conv2d(second)) =
        (&model.layers[block_id], &model.layers[block_id + 2])
    else {
        return (None, None);
    };
    let spec = CompressionSpec::Conv {
        k1: first.k(),
        k2: second.k(),
        c_in: first.c_in(),
        c_hidden: first.c_out(),
        c_out: second.c_out(),
    };
    let weight_only = crate::compress::compression_ratio_conv(&spec).ok();
    let k = first.k() + second.k() - 1;
    let orig = (first.c_out() * first.c_in() * first.k() * first.k()
        + first.c_out()
        + second.c_out() * second.c_in() * second.k() * second.k()
        + second.c_out()) as f64;
    let merged = (second.c_out() * first.c_in() * k * k + second.c_out()) as f64;
    (weight_only, Some(1.0 - merged / orig))
}

/// Regularized linearize-and-merge cleansing.
pub fn mergeguard_defend(
    model: &Model,
    benign: &LabeledImageSet,
    config: &DefenseConfig,
    eval: &EvalContext,
) -> Result<(Model, ExperimentReport)> {
    config.validate()?;
    let started = std::time::Instant::now();
    let trojaned = eval.measure(model)?;
    let params_before = count_params(model);
    let macs_before = count_macs(model)?;

    let block_ids = select_last_k_blocks(model, config.k_last_blocks)?;
    let mut defended = model.clone();
    wrap_blocks(&mut defended, &block_ids);

    let activation_layers: Vec<usize> = block_ids.iter().map(|&b| b + 1).collect();
    let settings = TrainSettings {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        lambda: config.lambda,
        regularized_layers: activation_layers.clone(),
        shuffle_seed: config.seed,
            max_grad_norm: Some(crate::train::DEFAULT_MAX_GRAD_NORM),
    };
    let train_stats = train(&mut defended, benign, &settings)?;

    // Finalize from the deepest block so earlier indices stay valid.
    let mut blocks = Vec::new();
    for &id in block_ids.iter().rev() {
        let Layer::Activation(act) = &defended.layers[id + 1] else {
            return Err(Error::Defense(format!("layer {} is no longer an activation", id + 1)));
        };
        let alpha = act.effective_alpha();
        let merged = alpha >= config.alpha_threshold;
        let (cr_weight_only, cr_with_bias) =
            if merged { block_compression(&defended, id) } else { (None, None) };
        if merged {
            if let Layer::Activation(act) = &mut defended.layers[id + 1] {
                act.alpha = AlphaParam::Pinned(1.0);
            }
            fuse_in_model(&mut defended, id)?;
        }
        blocks.push(BlockOutcome { block_id: id, final_alpha: alpha, merged, cr_weight_only, cr_with_bias });
    }
    blocks.reverse();

    if config.restore_epochs > 0 {
        let restore = TrainSettings {
            epochs: config.restore_epochs,
            lambda: 0.0,
            regularized_layers: vec![],
            shuffle_seed: config.seed ^ 0x5e5707e,
            ..settings
        };
        train(&mut defended, benign, &restore)?;
    }

    let defended_metrics = eval.measure(&defended)?;
    let report = ExperimentReport {
        attack: eval.attack_name.clone(),
        method: DefenseMethod::Mergeguard.name().into(),
        seed: config.seed,
        trojaned,
        defended: defended_metrics,
        params_before,
        params_after: count_params(&defended),
        macs_before,
        macs_after: count_macs(&defended)?,
        blocks,
        defense: config.clone(),
        train_stats,
        config_echo: serde_json::Value::Null,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((defended, report))
}

/// Vanilla fine-tuning baseline: the same loop with no added alpha
/// parameters, no regularizer, and no merging.
pub fn ft_defend(
    model: &Model,
    benign: &LabeledImageSet,
    config: &DefenseConfig,
    eval: &EvalContext,
) -> Result<(Model, ExperimentReport)> {
    config.validate()?;
    let started = std::time::Instant::now();
    let trojaned = eval.measure(model)?;
    let params_before = count_params(model);
    let macs_before = count_macs(model)?;

    let mut defended = model.clone();
    let settings = TrainSettings {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        lambda: 0.0,
        regularized_layers: vec![],
        shuffle_seed: config.seed,
            max_grad_norm: Some(crate::train::DEFAULT_MAX_GRAD_NORM),
    };
    let train_stats = if config.epochs > 0 {
        train(&mut defended, benign, &settings)?
    } else {
        TrainStats::default()
    };

    let defended_metrics = eval.measure(&defended)?;
    let report = ExperimentReport {
        attack: eval.attack_name.clone(),
        method: DefenseMethod::Ft.name().into(),
        seed: config.seed,
        trojaned,
        defended: defended_metrics,
        params_before,
        params_after: count_params(&defended),
        macs_before,
        macs_after: count_macs(&defended)?,
        blocks: vec![],
        defense: config.clone(),
        train_stats,
        config_echo: serde_json::Value::Null,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((defended, report))
}

pub fn defend(
    model: &Model,
    benign: &LabeledImageSet,
    config: &DefenseConfig,
    eval: &EvalContext,
) -> Result<(Model, ExperimentReport)> {
    match config.method {
        DefenseMethod::Mergeguard => mergeguard_defend(model, benign, config, eval),
        DefenseMethod::Ft => ft_defend(model, benign, config, eval),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActKind;
    use crate::data::synth_shapes;
    use crate::model::build_arch;
    use crate::rng::Rng;

    fn tiny_eval(set: &LabeledImageSet) -> EvalContext<'_> {
        EvalContext { test: set, triggered: None, target_label: None, attack_name: "none".into() }
    }

    #[test]
    fn defense_needs_mergeable_blocks() {
        // a model with a pool between conv layers has no dense block either
        let mut rng = Rng::new(2);
        let set = synth_shapes(120, 3, 12, 12, 2).unwrap();
        let model = build_arch("mlp-8", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let cfg = DefenseConfig { k_last_blocks: 2, epochs: 1, ..Default::default() };
        let err = mergeguard_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap_err();
        assert!(matches!(err, Error::Defense(_)));
    }

    #[test]
    fn huge_lambda_merges_the_block() {
        let set = synth_shapes(200, 3, 12, 12, 9).unwrap();
        let mut rng = Rng::new(9);
        let model = build_arch("mlp-16", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let cfg = DefenseConfig {
            lambda: 1e4,
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 9,
            ..Default::default()
        };
        let (defended, report) = mergeguard_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap();
        assert!(report.blocks[0].merged, "final alpha {}", report.blocks[0].final_alpha);
        assert!(report.params_after < report.params_before);
        assert!(defended.layers.len() < model.layers.len());
    }

    #[test]
    fn lambda_zero_merges_nothing() {
        let set = synth_shapes(100, 3, 12, 12, 10).unwrap();
        let mut rng = Rng::new(10);
        let model = build_arch("mlp-16", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let cfg = DefenseConfig {
            lambda: 0.0,
            epochs: 3,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 10,
            ..Default::default()
        };
        let (_, report) = mergeguard_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap();
        assert!(!report.blocks[0].merged);
        // alpha stays near its initialization under CE pressure alone
        assert!(report.blocks[0].final_alpha < 0.9);
        assert_eq!(report.params_after, report.params_before);
    }

    #[test]
    fn ft_zero_epochs_is_identity() {
        let set = synth_shapes(80, 3, 12, 12, 11).unwrap();
        let mut rng = Rng::new(11);
        let model = build_arch("mlp-8", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let cfg = DefenseConfig { method: DefenseMethod::Ft, epochs: 0, ..Default::default() };
        let (defended, report) = ft_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap();
        assert_eq!(report.trojaned, report.defended);
        let x = crate::tensor::Tensor::uniform(vec![4, 1, 12, 12], 0.0, 1.0, &mut rng);
        assert_eq!(model.forward(&x).unwrap().data(), defended.forward(&x).unwrap().data());
    }

    #[test]
    fn ft_same_seed_identical_reports() {
        let set = synth_shapes(100, 3, 12, 12, 12).unwrap();
        let mut rng = Rng::new(12);
        let model = build_arch("mlp-8", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let cfg = DefenseConfig {
            method: DefenseMethod::Ft,
            epochs: 3,
            batch_size: 25,
            seed: 12,
            ..Default::default()
        };
        let (_, a) = ft_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap();
        let (_, b) = ft_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn accounting_consistency_after_merge() {
        let set = synth_shapes(150, 3, 12, 12, 14).unwrap();
        let mut rng = Rng::new(14);
        let model = build_arch("mlp-12", &[1, 12, 12], 3, ActKind::Prelu, &mut rng).unwrap();
        let cfg = DefenseConfig {
            lambda: 1e4,
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 14,
            ..Default::default()
        };
        let (defended, report) = mergeguard_defend(&model, &set, &cfg, &tiny_eval(&set)).unwrap();
        assert!(report.blocks[0].merged);
        // params_after = params_before - (block params - fused params), exact
        let n_in = 144usize;
        let (h, c) = (12usize, 3usize);
        let block = (h * (n_in + 1)) + (c * (h + 1)) + 1; // dense + dense + alpha
        let fused = c * (n_in + 1);
        assert_eq!(report.params_after, report.params_before - (block - fused) as u64);
        assert_eq!(count_params(&defended), report.params_after);
    }
}
