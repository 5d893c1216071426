//! End-to-end experiment orchestration:
//! data -> poison -> train victim -> defend -> report, with every stage's
//! randomness split off the single run seed.

use crate::checkpoint;
use crate::config::{DatasetSource, RunConfig};
use crate::data::{load_idx, synth_shapes, LabeledImageSet};
use crate::defense::{defend, EvalContext, ExperimentReport};
use crate::error::{Error, Result};
use crate::model::{build_arch, Model};
use crate::poison::{apply_poison, build_asr_eval_set, PoisonSpec};
use crate::report::{to_json, ReportFormat};
use crate::rng::Rng;
use crate::train::{train, TrainSettings};
use std::path::Path;

// Stream labels for seed splitting; fixed so runs replay exactly.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_HOLDOUT: u64 = 3;
const STREAM_POISON: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_DEFENSE: u64 = 7;

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Everything a finished run hands back.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub all_reports: Vec<ExperimentReport>,
    pub victim: Model,
    pub defended: Model,
    pub poisoned_train: LabeledImageSet,
    pub benign: LabeledImageSet,
    pub test: LabeledImageSet,
}

pub struct PreparedData {
    pub victim_train: LabeledImageSet,
    pub benign: LabeledImageSet,
    pub test: LabeledImageSet,
    pub spec: Option<PoisonSpec>,
}

/// Load or synthesize data, withhold the benign subset, poison the rest.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let (train_set, test) = match config.dataset.source {
        DatasetSource::Synthetic => {
            let d = &config.dataset;
            let train = synth_shapes(
                d.n_train,
                d.classes,
                d.height,
                d.width,
                Rng::split(config.seed, STREAM_TRAIN_DATA).next_u64(),
            )?;
            let test = synth_shapes(
                d.n_test,
                d.classes,
                d.height,
                d.width,
                Rng::split(config.seed, STREAM_TEST_DATA).next_u64(),
            )?;
            (train, test)
        }
        DatasetSource::Idx => {
            let d = &config.dataset;
            let train =
                load_idx(d.train_images.as_ref().unwrap(), d.train_labels.as_ref().unwrap())?;
            let test = load_idx(d.test_images.as_ref().unwrap(), d.test_labels.as_ref().unwrap())?;
            (train, test)
        }
    };

    // Benign data is withheld from the victim's split before poisoning, so
    // the defender never sees a poisoned or victim-trained sample.
    let mut holdout_rng = Rng::split(config.seed, STREAM_HOLDOUT);
    let (victim_clean, benign) =
        train_set.split_holdout(config.defense.benign_fraction, &mut holdout_rng);

    let spec = config.attack.to_spec();
    let victim_train = match &spec {
        Some(spec) => {
            let mut poison_rng = Rng::split(config.seed, STREAM_POISON);
            apply_poison(&victim_clean, spec, &mut poison_rng)?
        }
        None => victim_clean,
    };
    Ok(PreparedData { victim_train, benign, test, spec })
}

/// Train the victim classifier on the (possibly poisoned) split.
pub fn train_victim(config: &RunConfig, data: &PreparedData) -> Result<Model> {
    let d = &config.dataset;
    let (c, h, w) = data.victim_train.dims();
    let input_shape = vec![c, h, w];
    let classes = data.victim_train.classes.max(d.classes);
    let mut init_rng = Rng::split(config.seed, STREAM_INIT);
    let mut model =
        build_arch(&config.victim.arch, &input_shape, classes, config.victim.activation, &mut init_rng)?;
    let settings = TrainSettings {
        epochs: config.victim.epochs,
        batch_size: config.victim.batch_size,
        learning_rate: config.victim.learning_rate,
        momentum: config.victim.momentum,
        lambda: 0.0,
        regularized_layers: vec![],
        shuffle_seed: config.seed,
            max_grad_norm: Some(crate::train::DEFAULT_MAX_GRAD_NORM),
    };
    train(&mut model, &data.victim_train, &settings)?;
    Ok(model)
}

/// Full pipeline. When the defense learning rate is a sweep, every rate runs
/// in parallel on the same trojaned victim and the report with the lowest
/// defended ASR (highest defended accuracy when no attack is configured)
/// is selected.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let data = stage("data", prepare_data(config))?;
    let victim = stage("train-victim", train_victim(config, &data))?;

    let triggered = match &data.spec {
        Some(spec) => Some(stage("asr-set", build_asr_eval_set(&data.test, spec))?),
        None => None,
    };
    let eval = EvalContext {
        test: &data.test,
        triggered: triggered.as_ref(),
        target_label: data.spec.as_ref().map(|s| s.target_label),
        attack_name: data
            .spec
            .as_ref()
            .map_or_else(|| "none".to_string(), |s| s.attack.name().to_string()),
    };

    let lrs = config.defense.learning_rate.values();
    let defense_seed = Rng::split(config.seed, STREAM_DEFENSE).next_u64();
    let mut runs: Vec<Option<Result<(Model, ExperimentReport)>>> = Vec::new();
    runs.resize_with(lrs.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &lr in &lrs {
            let cfg = config.defense.to_defense_config(lr, defense_seed);
            let victim = &victim;
            let benign = &data.benign;
            let eval = &eval;
            handles.push(scope.spawn(move || defend(victim, benign, &cfg, eval)));
        }
        for (slot, handle) in runs.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("defense worker panicked"));
        }
    });

    let mut all_reports = Vec::new();
    let mut best: Option<(usize, Model, ExperimentReport)> = None;
    for (i, slot) in runs.into_iter().enumerate() {
        let (model, mut report) = stage("defend", slot.unwrap())?;
        report.config_echo =
            serde_json::to_value(config).map_err(|e| Error::Serialize(e.to_string()))?;
        all_reports.push(report.clone());
        let better = match &best {
            None => true,
            Some((_, _, incumbent)) => match (report.defended.asr, incumbent.defended.asr) {
                (Some(a), Some(b)) => a < b,
                _ => report.defended.test_acc > incumbent.defended.test_acc,
            },
        };
        if better {
            best = Some((i, model, report));
        }
    }
    let (_, defended, report) = best.expect("at least one learning rate");

    let out = ExperimentOutput {
        report,
        all_reports,
        victim,
        defended,
        poisoned_train: data.victim_train,
        benign: data.benign,
        test: data.test,
    };
    if let Some(dir) = &config.output_dir {
        persist(&out, config, dir)?;
    }
    Ok(out)
}

/// Write the report, checkpoints, and the poisoned-set export.
pub fn persist(out: &ExperimentOutput, config: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), to_json(&out.report)?)?;
    if out.all_reports.len() > 1 {
        for report in &out.all_reports {
            let name = format!("report_lr{}.json", report.defense.learning_rate);
            std::fs::write(dir.join(name), to_json(report)?)?;
        }
    }
    checkpoint::save_model(&out.victim, config.seed, &dir.join("victim.ckpt"))?;
    checkpoint::save_model(&out.defended, config.seed, &dir.join("defended.ckpt"))?;
    checkpoint::save_dataset(&out.poisoned_train, config.seed, &dir.join("poisoned_train.dset"))?;
    checkpoint::save_dataset(&out.benign, config.seed, &dir.join("benign.dset"))?;
    checkpoint::save_dataset(&out.test, config.seed, &dir.join("test.dset"))?;
    crate::report::emit_report(&out.report, ReportFormat::Csv, &dir.join("report.csv"))?;
    Ok(())
}
