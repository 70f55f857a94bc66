//! Optimizer arithmetic, descent, determinism and checkpoint restore.

use capsroute::autodiff::{Tape, Tensor};
use capsroute::capsule::{AffineKind, RoutingSpec};
use capsroute::data::{Dataset, SynthConfig};
use capsroute::model::{build_model, Architecture, ModelConfig};
use capsroute::optim::{Adam, AdamConfig};
use capsroute::params::ParamStore;
use capsroute::train::{
    dataset_loss, evaluate, fitted_loss, prepare_data, run_experiment, train, train_step, ExperimentConfig,
    ExperimentRecord, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Adam on a quadratic bowl `Σ a_k (θ_k − c_k)²`, five steps.
#[test]
fn adam_matches_scripted_updates() {
    let a = [1.0, 4.0, 0.25];
    let c = [0.5, -1.0, 2.0];
    let theta0 = [0.0, 0.0, 0.0];
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };

    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::vector(theta0.to_vec()));
    let mut opt = Adam::new(cfg, &store);

    let (mut th, mut m, mut v) = (theta0, [0.0; 3], [0.0; 3]);
    for t in 1..=5 {
        let grad: Vec<f64> = (0..3).map(|k| 2.0 * a[k] * (store.get(id).data()[k] - c[k])).collect();
        opt.step(&mut store, &[Tensor::vector(grad)]).unwrap();

        for k in 0..3 {
            let g = 2.0 * a[k] * (th[k] - c[k]);
            m[k] = 0.9 * m[k] + 0.1 * g;
            v[k] = 0.999 * v[k] + 0.001 * g * g;
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            th[k] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        for k in 0..3 {
            assert!((store.get(id).data()[k] - th[k]).abs() < 1e-12, "step {t} coord {k}");
            assert!((opt.first_moment(0).data()[k] - m[k]).abs() < 1e-12);
            assert!((opt.second_moment(0).data()[k] - v[k]).abs() < 1e-12);
        }
    }
    assert_eq!(opt.steps(), 5);
    // the first step moves every coordinate by lr toward its minimum
    let first = [0.1, -0.1, 0.1];
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::vector(theta0.to_vec()));
    let mut opt = Adam::new(cfg, &store);
    let grad: Vec<f64> = (0..3).map(|k| 2.0 * a[k] * (0.0 - c[k])).collect();
    opt.step(&mut store, &[Tensor::vector(grad)]).unwrap();
    for k in 0..3 {
        assert!((store.get(id).data()[k] - first[k]).abs() < 1e-8);
    }
}

fn tiny_model(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        hidden_dim: 8,
        conv_kernel: 5,
        d_primary: 4,
        d_digit: 6,
        routing: RoutingSpec::attention(),
        ..ModelConfig::default()
    }
}

fn random_set(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::empty(1, 16, 16);
    for i in 0..n {
        let img: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        ds.push(&img, u8::from(i % 4 == 0), rng.random_range(0.2..0.4));
    }
    ds
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let ds = random_set(8, 1);
    let idx: Vec<usize> = (0..8).collect();
    for arch in [Architecture::CardioCaps, Architecture::Cnn1] {
        for seed in 0..20 {
            let mut cfg = tiny_model(arch);
            if seed % 2 == 1 {
                cfg.routing = RoutingSpec::dynamic(3);
            }
            let mut net = build_model(&cfg, [1, 16, 16], seed).unwrap();
            let weights = fitted_loss(&cfg.loss, &ds.labels_usize(), 2);
            let mut opt = Adam::new(
                AdamConfig {
                    lr: 1e-6,
                    ..AdamConfig::default()
                },
                &net.params,
            );
            let (before, _) = train_step(&mut net, &mut opt, &ds, &idx, &weights).unwrap();
            let after = dataset_loss(&net, &ds, &weights).unwrap();
            assert!(after.total < before.total, "{arch} seed {seed}: {} -> {}", before.total, after.total);
        }
    }
}

fn tiny_experiment(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        synth: SynthConfig {
            n_samples: 60,
            ..SynthConfig::default()
        },
        model: ModelConfig {
            hidden_dim: 8,
            ..ModelConfig::small()
        },
        train: TrainConfig {
            lr: 1e-3,
            max_epochs: 3,
            patience: 2,
            seed,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = tiny_experiment(4);
    let (r1, n1, _) = run_experiment(&cfg).unwrap();
    let (r2, n2, _) = run_experiment(&cfg).unwrap();
    assert_eq!(r1.to_json().unwrap(), r2.to_json().unwrap());
    for (a, b) in n1.params.ids().zip(n2.params.ids()) {
        let (x, y) = (n1.params.get(a).data(), n2.params.get(b).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let (r3, _, _) = run_experiment(&tiny_experiment(5)).unwrap();
    assert_ne!(r1.training, r3.training);
}

#[test]
fn record_survives_json() {
    let (record, _, _) = run_experiment(&tiny_experiment(6)).unwrap();
    let back = ExperimentRecord::from_json(&record.to_json().unwrap()).unwrap();
    assert_eq!(back, record);
    assert_eq!(record.split_sizes.iter().sum::<usize>(), 60);
}

#[test]
fn training_restores_the_best_checkpoint() {
    let cfg = tiny_experiment(7);
    let splits = prepare_data(&cfg).unwrap();
    let mut net = build_model(&cfg.model, splits.train.image_shape(), cfg.train.seed).unwrap();
    let outcome = train(&mut net, &splits.train, &splits.validation, &cfg.train).unwrap();
    let best = outcome
        .epochs
        .iter()
        .map(|e| e.validation.total)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(outcome.best_validation_loss, best);
    let now = dataset_loss(&net, &splits.validation, &outcome.loss).unwrap();
    assert_eq!(now.total, best);
    assert_eq!(outcome.epochs[outcome.best_epoch - 1].validation.total, best);
}

#[test]
fn early_stopping_honours_patience() {
    let mut cfg = tiny_experiment(8);
    // steps this small round away, so the validation loss never strictly improves
    cfg.train.lr = 1e-300;
    cfg.train.max_epochs = 6;
    cfg.train.patience = 2;
    let (record, _, _) = run_experiment(&cfg).unwrap();
    let t = &record.training;
    assert!(t.stopped_early);
    assert_eq!(t.best_epoch, 1);
    assert_eq!(t.epochs.len(), 3);
    assert!(t.epochs.iter().all(|e| e.validation.total == t.best_validation_loss));
}

#[test]
fn constant_votes_predict_the_majority_class() {
    let ds = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ds = Dataset::empty(1, 16, 16);
        for i in 0..50 {
            let img: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
            ds.push(&img, u8::from(i % 5 == 0), 0.3);
        }
        ds
    };
    let cfg = ModelConfig {
        affine_kind: AffineKind::Constant,
        ..tiny_model(Architecture::CardioCaps)
    };
    let net = build_model(&cfg, [1, 16, 16], 0).unwrap();
    let report = evaluate(&net, &ds).unwrap();
    assert_eq!(report.accuracy, 0.8);
    assert_eq!(report.f1, 0.0);
    assert_eq!(report.confusion.tn, 40);
    assert_eq!(report.confusion.fn_, 10);
}

#[test]
fn empty_splits_are_config_errors() {
    let cfg = tiny_experiment(1);
    let mut net = build_model(&tiny_model(Architecture::CardioCaps), [1, 16, 16], 0).unwrap();
    let empty = Dataset::empty(1, 16, 16);
    let some = random_set(4, 2);
    assert!(matches!(
        train(&mut net, &empty, &some, &cfg.train),
        Err(capsroute::Error::Config(_))
    ));
    assert!(evaluate(&net, &empty).is_err());
}

#[test]
fn non_finite_gradients_stop_training() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![1.0]));
    let mut opt = Adam::new(AdamConfig::default(), &store);
    let err = opt.step(&mut store, &[Tensor::vector(vec![f64::NAN])]).unwrap_err();
    assert!(err.to_string().contains("`w`"));
    assert_eq!(store.get(store.ids().next().unwrap()).data(), &[1.0]);
    // a tape built on a NaN input propagates to the gradient as well
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![f64::NAN]));
    let y = tape.square(x);
    let s = tape.sum(y);
    assert!(!tape.backward(s).unwrap().get(x).all_finite());
}
