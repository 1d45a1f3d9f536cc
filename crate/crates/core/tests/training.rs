use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unims::config::{ModelConfig, TrainConfig};
use unims::model::{TrainingExample, UniMs};
use unims::synth::{random_example, tiny_model_config};
use unims::training::{
    checkpoint::MANIFEST, evaluate_losses, load_checkpoint, save_checkpoint, train, train_step, TrainState,
};

fn corpus(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_example(cfg, 1 + i % 3, &mut rng)).collect()
}

fn tc(total: usize, peak: f64) -> TrainConfig {
    TrainConfig {
        total_steps: total,
        warmup_steps: 5,
        peak_lr: peak,
        batch_size: 2,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let cfg = tiny_model_config();
    let mut model = UniMs::new(cfg.clone()).unwrap();
    let before = model.params.clone();
    let data = corpus(&cfg, 4, 1);
    let mut st = TrainState::new(&model);
    for i in 0..5 {
        train_step(&mut model, &mut st, &data[i % 4..i % 4 + 1], &tc(10, 0.0)).unwrap();
    }
    assert_eq!(model.params, before);
    assert_eq!(st.step, 5);
}

#[test]
fn single_example_overfits() {
    let cfg = tiny_model_config();
    let mut model = UniMs::new(cfg.clone()).unwrap();
    let data = corpus(&cfg, 1, 2);
    let mut st = TrainState::new(&model);
    let out = train(&mut model, &mut st, &data, &[], &tc(200, 1e-2), None, None).unwrap();
    let first = out.records[0].losses.total;
    let last = out.records.last().unwrap().losses.total;
    assert!(last <= 0.1 * first, "{first} -> {last}");
    for r in &out.records {
        let l = r.losses;
        assert!(l.kd >= 0.0 && l.ext >= 0.0 && l.abs >= 0.0, "{r:?}");
    }
}

#[test]
fn teacher_forced_loss_decreases_every_step() {
    let cfg = tiny_model_config();
    let mut model = UniMs::new(cfg.clone()).unwrap();
    let data = corpus(&cfg, 1, 3);
    let cfg = TrainConfig {
        warmup_steps: 1,
        ..tc(1000, 3e-3)
    };
    let mut st = TrainState::new(&model);
    let mut prev = evaluate_losses(&model, &data).unwrap().abs;
    for step in 1..=50 {
        train_step(&mut model, &mut st, &data, &cfg).unwrap();
        let now = evaluate_losses(&model, &data).unwrap().abs;
        assert!(now < prev, "step {step}: {prev} -> {now}");
        prev = now;
    }
}

#[test]
fn seeded_runs_are_identical() {
    let cfg = ModelConfig {
        dropout: 0.1,
        ..tiny_model_config()
    };
    let data = corpus(&cfg, 6, 4);
    let run = || {
        let mut model = UniMs::new(cfg.clone()).unwrap();
        let mut st = TrainState::new(&model);
        let out = train(&mut model, &mut st, &data, &[], &tc(30, 3e-3), None, None).unwrap();
        (out.records, model.params)
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_training_matches_an_unbroken_run() {
    let cfg = tiny_model_config();
    let data = corpus(&cfg, 5, 5);
    let train_cfg = tc(40, 3e-3);

    let mut model = UniMs::new(cfg.clone()).unwrap();
    let mut st = TrainState::new(&model);
    let unbroken = train(&mut model, &mut st, &data, &[], &train_cfg, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut model = UniMs::new(cfg.clone()).unwrap();
    let mut st = TrainState::new(&model);
    train(&mut model, &mut st, &data, &[], &train_cfg, None, Some(25)).unwrap();
    save_checkpoint(&model, &st, &train_cfg, dir.path()).unwrap();
    let ck = load_checkpoint(dir.path(), Some(&cfg)).unwrap();
    let (mut model, mut st) = (ck.model, ck.state);
    let resumed = train(&mut model, &mut st, &data, &[], &ck.train, None, Some(35)).unwrap();
    assert_eq!(resumed.records, unbroken.records[25..35]);
}

#[test]
fn run_directory_keeps_best_three() {
    let cfg = tiny_model_config();
    let data = corpus(&cfg, 4, 6);
    let dir = tempfile::tempdir().unwrap();
    let mut model = UniMs::new(cfg.clone()).unwrap();
    let mut st = TrainState::new(&model);
    let train_cfg = TrainConfig {
        eval_every: 5,
        ..tc(40, 3e-3)
    };
    let out = train(&mut model, &mut st, &data, &data[..2], &train_cfg, Some(dir.path()), None).unwrap();
    assert_eq!(out.evals.len(), 8);
    assert_eq!(st.registry.len(), 3);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 40);
    let mut kept: Vec<String> = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    kept.sort();
    let mut want: Vec<String> = st.registry.iter().map(|e| format!("step-{:06}", e.step)).collect();
    want.sort();
    assert_eq!(kept, want);
    assert!(dir.path().join("last").join(MANIFEST).exists());
}
