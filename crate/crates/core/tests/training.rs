use hbl_core::layers::Rotation;
use hbl_core::tensor::{BntArray, DType};
use hbl_core::toytrain::{
    train_stage, train_two_stage, Checkpoint, Stage, StageOptions, TrainConfig, FINAL_WINDOW,
};
use hbl_core::Error;

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        layers: 1,
        hidden: 16,
        glu: 32,
        heads: 2,
        vocab: 8,
        seq_len: 8,
        batch: 8,
        steps_a8: 60,
        steps_a4: 6,
        warmup_steps: 5,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_curves() {
    let cfg = small(3);
    let (a8, a4) = train_two_stage(&cfg).unwrap();
    let (b8, b4) = train_two_stage(&cfg).unwrap();
    let bits = |c: &[hbl_core::toytrain::LossPoint]| {
        c.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a8.curve), bits(&b8.curve));
    assert_eq!(bits(&a4.unwrap().curve), bits(&b4.unwrap().curve));
}

#[test]
fn activation_rotation_a8_losses_are_finite() {
    let mut cfg = small(4);
    cfg.rotation = Rotation::Activation;
    let run = train_stage(&cfg, Stage::A8, None, StageOptions::default()).unwrap();
    assert!(run.diverged.is_none());
    assert_eq!(run.curve.len(), cfg.steps_a8);
    assert!(run
        .curve
        .iter()
        .all(|p| p.loss.is_finite() && p.grad_norm.is_finite()));
    let first = run.curve[..5].iter().map(|p| p.loss).sum::<f32>() / 5.0;
    assert!(run.final_loss().unwrap() < first, "loss did not go down");
}

#[test]
fn final_loss_is_a_trailing_mean() {
    let run = train_stage(&small(5), Stage::A8, None, StageOptions::default()).unwrap();
    let tail = &run.curve[run.curve.len() - FINAL_WINDOW..];
    let mean = tail.iter().map(|p| p.loss).sum::<f32>() / FINAL_WINDOW as f32;
    assert_eq!(run.final_loss(), Some(mean));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = small(6);
    let a8 = train_stage(&cfg, Stage::A8, None, StageOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a8.checkpoint.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded.step, cfg.steps_a8);
    assert_eq!(loaded.stage, Stage::A8);
    assert_eq!(loaded.config, cfg);
    for (a, b) in loaded
        .model
        .tensors()
        .iter()
        .zip(a8.checkpoint.model.tensors())
    {
        assert_eq!(*a, b);
    }
    assert_eq!(loaded.optimizer, a8.checkpoint.optimizer);

    // stored latents are full-precision reals, not their ternary form
    for name in loaded.model.param_names() {
        let arr = BntArray::load(dir.path().join("params").join(format!("{name}.bnt"))).unwrap();
        assert_eq!(arr.dtype(), DType::Real32, "{name}");
    }
    let w = &loaded.model.tensors()[2];
    assert!(w.data().iter().any(|v| v.abs() != w.data()[0].abs()));

    let direct = train_stage(
        &cfg,
        Stage::A4,
        Some(a8.checkpoint),
        StageOptions::default(),
    )
    .unwrap();
    let resumed = train_stage(&cfg, Stage::A4, Some(loaded), StageOptions::default()).unwrap();
    let bits = |r: &hbl_core::toytrain::StageRun| {
        r.curve.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&direct), bits(&resumed));
    assert_eq!(direct.checkpoint.step, cfg.total_steps());
}

#[test]
fn resume_contracts() {
    let cfg = small(7);
    assert!(matches!(
        train_stage(&cfg, Stage::A4, None, StageOptions::default()),
        Err(Error::InvalidConfig(_))
    ));
    let a8 = train_stage(&cfg, Stage::A8, None, StageOptions::default()).unwrap();
    let mut wider = cfg.clone();
    wider.hidden = 32;
    wider.glu = 64;
    assert!(matches!(
        train_stage(
            &wider,
            Stage::A4,
            Some(a8.checkpoint.clone()),
            StageOptions::default()
        ),
        Err(Error::ConfigMismatch(_))
    ));
    let mut longer = cfg.clone();
    longer.steps_a8 += 10;
    assert!(matches!(
        train_stage(
            &longer,
            Stage::A4,
            Some(a8.checkpoint),
            StageOptions::default()
        ),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn optimizer_reuse_versus_reset() {
    // measured and reported; the direction is not guaranteed at this scale
    let cfg = TrainConfig {
        steps_a8: 1800,
        steps_a4: 200,
        warmup_steps: 20,
        ..small(8)
    };
    let a8 = train_stage(&cfg, Stage::A8, None, StageOptions::default()).unwrap();
    let reused = train_stage(
        &cfg,
        Stage::A4,
        Some(a8.checkpoint.clone()),
        StageOptions::default(),
    )
    .unwrap();
    let reset = train_stage(
        &cfg,
        Stage::A4,
        Some(a8.checkpoint),
        StageOptions {
            reset_optimizer: true,
        },
    )
    .unwrap();
    let (r, z) = (reused.final_loss().unwrap(), reset.final_loss().unwrap());
    eprintln!("a4 after 200 steps: reused moments {r:.3e}, reset moments {z:.3e}");
    if r >= z {
        eprintln!("note: reused moments did not beat reset moments on this run");
    }
    assert!(r.is_finite() && z.is_finite());
}
