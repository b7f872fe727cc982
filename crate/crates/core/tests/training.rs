use crossfuse_core::model::train::PreparedSet;
use crossfuse_core::model::{Checkpoint, ModelConfig, TrainConfig, Trainer};
use crossfuse_core::synth::{self, SceneConfig};
use crossfuse_core::Error;

fn data(seed: u64, n_train: usize, n_val: usize) -> (PreparedSet, PreparedSet) {
    let (samples, _) = synth::synthesize(seed, &SceneConfig::default(), n_train, n_val, 0);
    (
        PreparedSet::new(&samples[..n_train], 128).unwrap(),
        PreparedSet::new(&samples[n_train..], 128).unwrap(),
    )
}

fn config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        epochs,
        model: ModelConfig::default(),
        ..TrainConfig::default()
    }
}

#[test]
fn loss_falls_over_five_epochs() {
    let (train, _) = data(3, 48, 0);
    let mut drops: Vec<f64> = (0..3u64)
        .map(|seed| {
            let mut t = Trainer::new(config(seed, 5)).unwrap();
            t.run(&train, None, |_, _| Ok(())).unwrap();
            t.log[4].loss.total - t.log[0].loss.total
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] < 0.0, "median change {}", drops[1]);
}

#[test]
fn huge_learning_rate_aborts_with_named_term() {
    let (train, _) = data(4, 16, 0);
    let cfg = TrainConfig {
        lr_init: 1e3,
        lr_final: 1e3,
        ..config(0, 3)
    };
    let mut t = Trainer::new(cfg).unwrap();
    match t.run(&train, None, |_, _| Ok(())) {
        Err(Error::NonFiniteLoss { term, epoch, step }) => {
            assert!(["objectness", "classification", "box_iou", "total"].contains(&term), "{term}");
            assert!(epoch >= 1 && step >= 1);
        }
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn same_seed_same_curve() {
    let (train, val) = data(5, 16, 8);
    let run = || {
        let mut t = Trainer::new(config(9, 2)).unwrap();
        t.run(&train, Some(&val), |_, _| Ok(())).unwrap();
        t.log
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
        assert_eq!(x.val_map50.map(f64::to_bits), y.val_map50.map(f64::to_bits));
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let (train, val) = data(6, 16, 8);
    let mut t = Trainer::new(config(1, 1)).unwrap();
    t.run(&train, None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::capture(&t).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
    assert_eq!(back.epoch, 1);
    assert_eq!(t.evaluate(&val).unwrap(), back.evaluate(&val).unwrap());
}

#[test]
fn resume_reproduces_next_epoch_loss() {
    let (train, _) = data(7, 16, 0);
    let mut straight = Trainer::new(config(2, 2)).unwrap();
    straight.run(&train, None, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(config(2, 2)).unwrap();
    first.train_epoch(&train).unwrap();
    let bytes = Checkpoint::capture(&first).to_bytes();
    let mut resumed = Checkpoint::from_bytes(&bytes, "mem".as_ref()).unwrap().into_trainer().unwrap();
    let (loss, _) = resumed.train_epoch(&train).unwrap();
    assert!((loss.total - straight.log[1].loss.total).abs() < 1e-6);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let t = Trainer::new(config(0, 1)).unwrap();
    let mut bytes = Checkpoint::capture(&t).to_bytes();
    bytes[0] = b'Y';
    assert!(matches!(Checkpoint::from_bytes(&bytes, "x".as_ref()), Err(Error::Checkpoint { .. })));
    let good = Checkpoint::capture(&t).to_bytes();
    assert!(Checkpoint::from_bytes(&good[..good.len() - 3], "x".as_ref()).is_err());
}
