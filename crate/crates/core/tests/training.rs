use rand::Rng;
use tealeaf_core::adversarial::{adversarial_train, epsilon_sweep, AdversarialConfig};
use tealeaf_core::models::{build_model_with, ArchitectureId, BuildOptions, Classifier, ModelScale, TinyConvNet};
use tealeaf_core::preprocess::{AugmentConfig, ImageTensor, PreprocessConfig};
use tealeaf_core::trainer::{evaluate_loss_accuracy, train, MemorySource, TrainConfig};
use tealeaf_core::Error;
use tealeaf_testkit::data::{rng, WatermarkTask};

fn tinted(classes: usize, per_class: usize, side: usize, seed: u64) -> MemorySource {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        let tint = [
            (c * 37 % 100) as f32 / 100.0,
            (c * 61 % 100) as f32 / 100.0,
            (c * 13 % 100) as f32 / 100.0,
        ];
        for _ in 0..per_class {
            images.push(ImageTensor::from_fn(side, side, |_, _, ch| {
                tint[ch] + r.random_range(-0.15..0.15)
            }));
            labels.push(c);
        }
    }
    MemorySource::new(images, labels)
}

fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 5e-3,
        max_epochs: epochs,
        patience: epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn tiny_subset_overfits() {
    let data = tinted(7, 5, 16, 1);
    let mut model = build_model_with(
        ArchitectureId::MobilenetV2,
        7,
        &BuildOptions {
            scale: ModelScale::Compact,
            preprocess: PreprocessConfig::square(16),
            seed: 1,
            ..BuildOptions::default()
        },
    )
    .unwrap();
    // One full batch: with 8-image batches the batch-norm statistics keep the
    // train-mode accuracy bouncing even after the model has fit the data.
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        batch_size: data.labels.len(),
        ..quick_cfg(30, 1)
    };
    let history = train(&mut model, &data, &data, &cfg, &AugmentConfig::disabled()).unwrap();
    let last = history.last().unwrap();
    assert!(history.records.len() <= 30);
    assert!(last.train_accuracy >= 0.95, "train accuracy {}", last.train_accuracy);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let task = WatermarkTask::generate(12, 4, 40, 0, 3);
    let run = || {
        let mut m = TinyConvNet::new(2, 4, 8);
        let aug = AugmentConfig {
            seed: 5,
            ..AugmentConfig::default()
        };
        let h = train(&mut m, &task.train, &task.train, &quick_cfg(3, 2), &aug).unwrap();
        (h, m.predict_image(&task.train.images[0]))
    };
    assert_eq!(run(), run());
}

#[test]
fn best_epoch_weights_are_restored() {
    let task = WatermarkTask::generate(12, 4, 40, 0, 4);
    let val = WatermarkTask::generate(12, 4, 20, 0, 5).train;
    let mut m = TinyConvNet::new(2, 4, 2);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..quick_cfg(6, 1)
    };
    let h = train(&mut m, &task.train, &val, &cfg, &AugmentConfig::disabled()).unwrap();
    let best = h.best().unwrap();
    let min = h.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best.val_loss, min);
    let (loss, acc) = evaluate_loss_accuracy(&m, &val, cfg.batch_size).unwrap();
    assert_eq!((loss, acc), (best.val_loss, best.val_accuracy));
}

#[test]
fn poisoned_weights_abort_with_position() {
    let task = WatermarkTask::generate(8, 2, 16, 0, 1);
    let mut m = TinyConvNet::new(2, 2, 0);
    let w = m.head().weight;
    tealeaf_core::models::TrainableClassifier::params_mut(&mut m)
        .get_mut(w)
        .data_mut()[0] = f32::NAN;
    let err = train(
        &mut m,
        &task.train,
        &task.train,
        &quick_cfg(2, 0),
        &AugmentConfig::disabled(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 1 }), "{err}");
}

#[test]
fn empty_splits_rejected() {
    let task = WatermarkTask::generate(8, 2, 4, 0, 1);
    let mut m = TinyConvNet::new(2, 2, 0);
    let empty = MemorySource::default();
    let aug = AugmentConfig::disabled();
    assert!(matches!(
        train(&mut m, &empty, &task.train, &quick_cfg(1, 0), &aug),
        Err(Error::EmptySplit(_))
    ));
    assert!(matches!(
        train(&mut m, &task.train, &empty, &quick_cfg(1, 0), &aug),
        Err(Error::EmptySplit(_))
    ));
}

fn adversarial_vs_plain(adv: AdversarialConfig) {
    let task = WatermarkTask::generate(10, 3, 24, 0, 6);
    let cfg = quick_cfg(3, 4);
    let aug = AugmentConfig::disabled();
    let mut plain = TinyConvNet::new(2, 3, 1);
    let h_plain = train(&mut plain, &task.train, &task.train, &cfg, &aug).unwrap();
    let mut robust = TinyConvNet::new(2, 3, 1);
    let h_adv = adversarial_train(&mut robust, &task.train, &task.train, &cfg, &aug, &adv).unwrap();
    assert_eq!(h_plain, h_adv);
}

#[test]
fn zero_epsilon_is_plain_training() {
    adversarial_vs_plain(AdversarialConfig {
        epsilon: 0.0,
        ..AdversarialConfig::default()
    });
}

#[test]
fn zero_fraction_is_plain_training() {
    adversarial_vs_plain(AdversarialConfig {
        epsilon: 0.2,
        adversarial_fraction: 0.0,
        ..AdversarialConfig::default()
    });
}

#[test]
fn adversarial_training_changes_the_run() {
    let task = WatermarkTask::generate(10, 3, 24, 0, 6);
    let cfg = quick_cfg(2, 4);
    let aug = AugmentConfig::disabled();
    let mut plain = TinyConvNet::new(2, 3, 1);
    let h_plain = train(&mut plain, &task.train, &task.train, &cfg, &aug).unwrap();
    let mut robust = TinyConvNet::new(2, 3, 1);
    let adv = AdversarialConfig {
        epsilon: 0.1,
        ..AdversarialConfig::default()
    };
    let h_adv = adversarial_train(&mut robust, &task.train, &task.train, &cfg, &aug, &adv).unwrap();
    assert_ne!(h_plain.records[0].train_loss, h_adv.records[0].train_loss);
}

#[test]
fn single_zero_sweep_matches_clean_run() {
    let task = WatermarkTask::generate(10, 3, 24, 0, 7);
    let cfg = quick_cfg(3, 9);
    let aug = AugmentConfig::disabled();
    let adv = AdversarialConfig {
        sweep_epsilons: vec![0.0],
        ..AdversarialConfig::default()
    };
    let report = epsilon_sweep(
        || Ok(TinyConvNet::new(2, 3, 4)),
        &task.train,
        &task.train,
        &cfg,
        &aug,
        &adv,
    )
    .unwrap();
    let mut clean = TinyConvNet::new(2, 3, 4);
    let h = train(&mut clean, &task.train, &task.train, &cfg, &aug).unwrap();
    let best = h.best().unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = report.rows[0];
    assert_eq!(
        (row.epsilon, row.val_loss, row.val_accuracy, row.optimal_epochs),
        (0.0, best.val_loss, best.val_accuracy, h.best_epoch)
    );
}

#[test]
fn sweep_has_one_row_per_epsilon() {
    let task = WatermarkTask::generate(8, 2, 16, 0, 8);
    let adv = AdversarialConfig {
        sweep_epsilons: vec![0.0, 0.1, 0.2],
        ..AdversarialConfig::default()
    };
    let report = epsilon_sweep(
        || Ok(TinyConvNet::new(2, 2, 0)),
        &task.train,
        &task.train,
        &quick_cfg(1, 0),
        &AugmentConfig::disabled(),
        &adv,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.val_accuracy)));
    assert_eq!(
        report.rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
        vec![0.0, 0.1, 0.2]
    );
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_training() {
    let data = tinted(3, 6, 16, 4);
    let val = tinted(3, 2, 16, 5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut model = build_model_with(
                ArchitectureId::MobilenetV2,
                3,
                &BuildOptions {
                    scale: ModelScale::Compact,
                    preprocess: PreprocessConfig::square(16),
                    seed: 3,
                    ..BuildOptions::default()
                },
            )
            .unwrap();
            let history = train(&mut model, &data, &val, &quick_cfg(2, 3), &AugmentConfig::default()).unwrap();
            (model.fingerprint(), history.records)
        })
    };
    let (one, h1) = run(1);
    let (many, h4) = run(4);
    assert_eq!(one, many);
    assert_eq!(h1, h4);
}
