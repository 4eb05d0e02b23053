use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tanet_core::blocks::{ToyNet, ToyNetConfig, Variant};
use tanet_core::metrics::{compute_metrics, ConfusionMatrix};
use tanet_core::synth::{gen_dataset, Dataset, Split, SynthConfig};
use tanet_core::train::{evaluate_model, evaluate_samples, train_toy, TrainConfig};

fn dataset(cfg: &SynthConfig) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(cfg, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn single_sample_overfits() {
    let (_dir, ds) = dataset(&SynthConfig {
        train: 1,
        val: 1,
        ..SynthConfig::standard(11)
    });
    // At the default 5e-4 the poly schedule has decayed to zero before the
    // loss gets below the bar (about 0.076 after 200 steps).
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        base_lr: 2e-3,
        validate_each_epoch: false,
        ..TrainConfig::default()
    };
    let out = train_toy(&ds, &ToyNetConfig::new(4, Variant::Full), &cfg).unwrap();
    let last = out.log.last().unwrap().train_loss;
    assert!(last < 0.05, "final loss {last}");
}

/// A single untrained network maps each class color to one fixed class,
/// so its accuracy is a coarse random fraction; chance level is the
/// expectation over initializations.
#[test]
fn untrained_model_is_at_chance() {
    let (_dir, ds) = dataset(&SynthConfig::standard(5));
    let inits = 20;
    let mut total = 0.0;
    for seed in 0..inits {
        let mut net = ToyNet::<f32>::new(
            ToyNetConfig::new(4, Variant::Full),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        total += evaluate_model(&mut net, &ds, Split::Val).unwrap().oa;
    }
    let oa = total / inits as f64;
    assert!((oa - 0.25).abs() <= 0.1, "mean OA {oa}");
}

#[test]
fn ground_truth_predictions_score_one() {
    let (_dir, ds) = dataset(&SynthConfig {
        train: 2,
        val: 6,
        ..SynthConfig::standard(2)
    });
    let mut cm = ConfusionMatrix::new(ds.classes()).unwrap();
    for s in ds.load_split(Split::Val).unwrap() {
        let labels: Vec<usize> = s.labels.data().iter().map(|&l| l as usize).collect();
        cm.update(&labels, &labels).unwrap();
    }
    let m = compute_metrics(&cm).unwrap();
    assert_eq!(m.oa, 1.0);
    assert_eq!(m.miou, 1.0);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let (_dir, ds) = dataset(&SynthConfig {
        train: 1,
        val: 1,
        ..SynthConfig::standard(1)
    });
    let mut net = ToyNet::<f32>::new(
        ToyNetConfig::new(3, Variant::Ablated),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(evaluate_model(&mut net, &ds, Split::Val).is_err());
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(train_toy(&ds, &ToyNetConfig::new(3, Variant::Full), &cfg).is_err());
}

/// One full-length run on the standard configuration: the window-5
/// smoothed loss never rises by more than 5 % and the trained network
/// clears the mIoU bar.
#[test]
fn standard_config_training_run() {
    let (_dir, ds) = dataset(&SynthConfig::standard(0));
    let out = train_toy(
        &ds,
        &ToyNetConfig::new(4, Variant::Full),
        &TrainConfig::default(),
    )
    .unwrap();
    assert_eq!(out.log.len(), 30);
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    let smoothed: Vec<f64> = losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    for (i, w) in smoothed.windows(2).enumerate() {
        assert!(
            w[1] <= w[0] * 1.05,
            "smoothed loss rose at window {i}: {smoothed:?}"
        );
    }
    let mut net = out.net;
    let val = ds.load_split(Split::Val).unwrap();
    let report = evaluate_samples(&mut net, &val, 8).unwrap();
    assert!(report.miou >= 0.40, "val mIoU {}", report.miou);
    assert_eq!(Some(report.miou), out.log.last().unwrap().val_miou);
}
