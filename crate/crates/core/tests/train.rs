use masktx::config::{Config, ModelConfig, P2pMode};
use masktx::dataset::Dataset;
use masktx::error::Error;
use masktx::train::{batch_indices, poly_lr, Run, Trainer, CHECKPOINT_FILE, LOG_HEADER};

/// A 32x32 configuration small enough for many steps in a test.
fn small_config() -> Config {
    let mut cfg = Config::parse(
        "scene.height = 32\nscene.width = 32\nscene.min_size = 3\nscene.max_size = 6\nscene.max_things = 3\n\
         model.height = 32\nmodel.width = 32\nmodel.slots = 6\nmodel.mask_dim = 8\n\
         model.stem_channels = 4,8\nmodel.stage8_channels = 8\nmodel.stage16_channels = 16\n\
         model.memory_dim = 16\nmodel.decoder_channels = 8,8\nmodel.heads = 2\nmodel.transformer_blocks = 1\n\
         train.batch_size = 2\ntrain.steps = 20\ntrain.lr = 0.001\n",
    )
    .unwrap();
    cfg.validate().unwrap();
    cfg.train.checkpoint_every = 0;
    cfg
}

fn data(cfg: &Config, n: u64) -> Dataset {
    Dataset::generate(&cfg.scene, 0, n)
}

#[test]
fn poly_schedule_examples() {
    assert_eq!(poly_lr(0, 100, 1e-3, 0.9), 1e-3);
    assert_eq!(poly_lr(100, 100, 1e-3, 0.9), 0.0);
    assert_eq!(poly_lr(150, 100, 1e-3, 0.9), 0.0);
    let half = poly_lr(50, 100, 1.0, 0.9);
    assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
    assert!((half - 0.5359).abs() < 1e-4);
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let lr = poly_lr(s, 100, 1.0, 0.9);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn batch_order_depends_only_on_seed_and_step() {
    assert_eq!(batch_indices(3, 7, 50, 8), batch_indices(3, 7, 50, 8));
    assert_ne!(batch_indices(3, 7, 50, 8), batch_indices(3, 8, 50, 8));
    let b = batch_indices(1, 0, 50, 8);
    let unique: std::collections::BTreeSet<_> = b.iter().collect();
    assert_eq!(unique.len(), 8);
    assert!(b.iter().all(|&i| i < 50));
    let small = batch_indices(1, 0, 3, 8);
    assert_eq!(small.len(), 8);
    assert!(small.iter().all(|&i| i < 3));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = small_config();
    cfg.train.lr = 0.0;
    let d = data(&cfg, 4);
    let mut t = Trainer::new(cfg).unwrap();
    let before = t.model.params.clone();
    for _ in 0..3 {
        t.train_step(&d).unwrap();
    }
    for id in before.ids() {
        assert_eq!(before.get(id), t.model.params.get(id), "{}", before.name(id));
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let cfg = small_config();
    let d = data(&cfg, 6);
    let run = |cfg: Config| {
        let mut t = Trainer::new(cfg).unwrap();
        (0..4).map(|_| t.train_step(&d).unwrap().values.total).collect::<Vec<_>>()
    };
    assert_eq!(run(cfg.clone()), run(cfg.clone()));
    let mut other = cfg.clone();
    other.train.seed = 5;
    assert_ne!(run(cfg), run(other));
}

#[test]
fn a_small_step_decreases_the_loss_on_a_fixed_batch() {
    let mut cfg = small_config();
    cfg.train.weight_decay = 0.0;
    cfg.train.backbone_lr_mult = 1.0;
    let d = data(&cfg, 8);
    let batch: Vec<_> = d.examples.iter().take(2).collect();
    for seed in 0..3 {
        cfg.train.seed = seed;
        cfg.train.lr = 1e-4;
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.model = masktx::Model::new(cfg.resolved_model(), seed).unwrap();
        let first = t.compute_batch(&batch).unwrap();
        let before = first.values.total;
        // Keep normalization statistics out of the comparison: batch
        // statistics are used in both evaluations.
        t.apply(first);
        let after = t.compute_batch(&batch).unwrap().values.total;
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let cfg = small_config();
    let d = data(&cfg, 6);
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let full: Vec<f64> = (0..6).map(|_| straight.train_step(&d).unwrap().values.total).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.maxw");
    let mut first = Trainer::new(cfg).unwrap();
    for _ in 0..3 {
        first.train_step(&d).unwrap();
    }
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.step, 3);
    assert_eq!(resumed.cfg, first.cfg);
    let rest: Vec<f64> = (0..3).map(|_| resumed.train_step(&d).unwrap().values.total).collect();
    assert_eq!(&full[3..], &rest[..]);
    assert_eq!(resumed.model.params, straight.model.params);
}

#[test]
fn non_finite_loss_is_reported_with_components() {
    let cfg = small_config();
    let d = data(&cfg, 2);
    let mut t = Trainer::new(cfg).unwrap();
    let id = t.model.params.find("heads.class_out.weight").unwrap();
    t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
    match t.train_step(&d) {
        Err(Error::NonFiniteLoss { step, components }) => {
            assert_eq!(step, 0);
            assert!(components.contains("probs"), "{components}");
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }

    // Poisoning only the semantic head leaves matching intact and shows up
    // in the per-component dump.
    let mut t = Trainer::new(small_config()).unwrap();
    let id = t.model.params.find("heads.sem_out.bias").unwrap();
    t.model.params.get_mut(id).data_mut()[0] = f64::INFINITY;
    match t.train_step(&d) {
        Err(Error::NonFiniteLoss { components, .. }) => assert!(components.contains("semantic"), "{components}"),
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn config_text_round_trip_and_errors() {
    let cfg = small_config();
    assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    let custom = Config::parse("# comment\n\nmodel.p2p = axial  # trailing\nloss.similarity = sum\ntrain.seed=9\n").unwrap();
    assert_eq!(custom.model.p2p, P2pMode::Axial);
    assert_eq!(custom.train.seed, 9);
    assert_eq!(custom.model, ModelConfig { p2p: P2pMode::Axial, ..ModelConfig::default() });
    for bad in ["model.colour = 3", "train.steps = many", "just words", "model.p2p = dense"] {
        assert!(matches!(Config::parse(bad), Err(Error::Config { line: 1, .. })), "{bad}");
    }
    let mut zero = Config::default();
    zero.train.steps = 0;
    assert!(zero.validate().is_err());
    assert!(Trainer::new(zero).is_err());
}

#[test]
fn run_writes_logs_and_checkpoints_and_resumes() {
    let mut cfg = small_config();
    cfg.train.steps = 6;
    cfg.train.checkpoint_every = 3;
    cfg.train.eval_every = 3;
    let d = data(&cfg, 6);
    let val = Dataset::generate(&cfg.scene, 1000, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut evals = 0;
    let mut run = Run { trainer: Trainer::new(cfg.clone()).unwrap(), train: &d, val: Some(&val), out: Some(dir.path().into()) };
    run.run(|_, pq| evals += pq.is_some() as usize).unwrap();
    assert_eq!(evals, 2);
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,"));
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 8));
    let eval = std::fs::read_to_string(dir.path().join("eval_log.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    let ck = dir.path().join(CHECKPOINT_FILE);
    let done = Trainer::load(&ck).unwrap();
    assert_eq!(done.step, 6);
    assert_eq!(done.model.params, run.trainer.model.params);
}
