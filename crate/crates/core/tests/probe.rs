// Temporary tuning probe; replaced by the acceptance suite.

use mergeguard_core::config::RunConfig;
use mergeguard_core::experiment::run_experiment;

fn config(seed: u64, lr: f32, victim_epochs: usize) -> RunConfig {
    config_n(seed, lr, victim_epochs, 8000)
}

fn config_n(seed: u64, lr: f32, victim_epochs: usize, n_train: usize) -> RunConfig {
    RunConfig::from_toml_str(&format!(
        r#"
seed = {seed}

[dataset]
source = "synthetic"
classes = 4
height = 16
width = 16
n_train = {n_train}
n_test = 2000

[attack]
kind = "badnet"
poisoning_ratio = 0.1
target_label = 0

[victim]
arch = "desk-cnn"
epochs = {victim_epochs}
batch_size = 64
learning_rate = 0.05

[defense]
method = "mergeguard"
benign_fraction = 0.05
lambda = 1.0
epochs = 20
batch_size = 128
momentum = 0.9
learning_rate = {lr}
k_last_blocks = 1
alpha_threshold = 0.99
"#
    ))
    .unwrap()
}

fn show(tag: &str, out: &mergeguard_core::experiment::ExperimentOutput, secs: f64) {
    let r = &out.report;
    println!(
        "{tag}: trojaned acc={:.3} asr={:.3} | defended acc={:.3} asr={:.3} | alpha={:.4} merged={} | {:.1}s",
        r.trojaned.test_acc,
        r.trojaned.asr.unwrap(),
        r.defended.test_acc,
        r.defended.asr.unwrap(),
        r.blocks[0].final_alpha,
        r.blocks[0].merged,
        secs
    );
}

#[test]
#[ignore]
fn probe_one_seed() {
    for seed in 6u64..=12 {
        let t0 = std::time::Instant::now();
        let out = run_experiment(&config_n(seed, 0.18, 3, 24000)).unwrap();
        show(&format!("badnet lr=0.18 seed={seed}"), &out, t0.elapsed().as_secs_f64());
    }
    for seed in 1u64..=5 {
        let t0 = std::time::Instant::now();
        let mut cfg = config_n(seed, 0.18, 3, 24000);
        cfg.attack.kind = mergeguard_core::config::AttackChoice::None;
        let out = run_experiment(&cfg).unwrap();
        let r = &out.report;
        println!(
            "clean seed={seed}: trojaned acc={:.3} | defended acc={:.3} | alpha={:.4} merged={} | {:.1}s",
            r.trojaned.test_acc, r.defended.test_acc,
            r.blocks[0].final_alpha, r.blocks[0].merged,
            t0.elapsed().as_secs_f64()
        );
    }
}
