use proptest::prelude::*;
use rand::Rng;
use slope_core::data::Dataset;
use slope_core::linalg::Matrix;
use slope_core::nn::{InputShape, Network, NetworkSpec};
use slope_core::rng::{seeded, Stream};
use slope_core::train::{evaluate, train, TrainConfig, TrainError};

fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed, Stream::Custom(41));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 3;
        let center = [[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]][label];
        rows.push(vec![
            center[0] + rng.random_range(-1.0..1.0),
            center[1] + rng.random_range(-1.0..1.0),
        ]);
        labels.push(label);
    }
    Dataset::new(Matrix::from_rows(&rows), labels, 3, InputShape::Flat(2)).unwrap()
}

#[test]
fn uniform_logits_cost_log_ten_and_hit_the_first_class_prior() {
    let mut net = Network::init(&NetworkSpec::dense(2, &[4], 10), 0).unwrap();
    let last = net.layers_mut().last_mut().unwrap();
    last.weight = Matrix::zeros(10, 4);
    last.bias = vec![0.0; 10];
    let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
    let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, -(i as f64)]).collect();
    let ds = Dataset::new(Matrix::from_rows(&rows), labels, 10, InputShape::Flat(2)).unwrap();
    let ev = evaluate(&net, &ds).unwrap();
    assert!((ev.loss - 10f64.ln()).abs() < 1e-12);
    // ties resolve to class 0, which holds a tenth of the labels
    assert!((ev.accuracy - 0.1).abs() < 1e-12);
}

#[test]
fn huge_margin_point_has_zero_loss() {
    let mut net = Network::init(&NetworkSpec::dense(2, &[3], 4), 1).unwrap();
    net.layers_mut().last_mut().unwrap().bias[2] = 1e3;
    let ds = Dataset::new(Matrix::from_rows(&[vec![0.1, 0.2]]), vec![2], 4, InputShape::Flat(2)).unwrap();
    let ev = evaluate(&net, &ds).unwrap();
    assert!(ev.loss < 1e-12);
    assert_eq!(ev.accuracy, 1.0);
}

#[test]
fn training_learns_separable_blobs_and_slope_grows() {
    let (tr, va) = (blobs(300, 1), blobs(150, 2));
    let cfg = TrainConfig {
        epochs: 20,
        learning_rate: 0.01,
        slope_sample_size: 100,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(Network::init(&NetworkSpec::dense(2, &[16], 3), 3).unwrap(), &tr, &va, &cfg).unwrap();
    assert!(out.log.record(out.log.optimal_epoch).val_accuracy > 0.9);
    assert!(out.log.record(out.log.optimal_epoch).slope.mean > out.log.initial.slope.mean);
    assert_eq!(out.slope_sample.len(), 100);
}

#[test]
fn invalid_configs_and_divergence_are_errors() {
    let tr = blobs(30, 1);
    let net = Network::init(&NetworkSpec::dense(2, &[4], 3), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let bad = TrainConfig {
        batch_size: 0,
        ..cfg.clone()
    };
    assert!(matches!(train(net.clone(), &tr, &tr, &bad), Err(TrainError::Config(_))));
    let diverging = TrainConfig {
        learning_rate: 1e300,
        ..cfg
    };
    let err = train(net, &tr, &tr, &diverging).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn optimal_epoch_minimizes_validation_loss(seed in 0u64..1000, epochs in 0usize..6) {
        let (tr, va) = (blobs(60, seed), blobs(30, seed + 1));
        let cfg = TrainConfig {
            epochs,
            seed,
            learning_rate: 0.05,
            batch_size: 8,
            slope_sample_size: 20,
            ..TrainConfig::default()
        };
        let out = train(Network::init(&NetworkSpec::dense(2, &[8], 3), seed).unwrap(), &tr, &va, &cfg).unwrap();
        let best = out.log.record(out.log.optimal_epoch).val_loss;
        for r in &out.log.epochs {
            prop_assert!(best <= r.val_loss);
        }
        prop_assert_eq!(out.log.epochs.len(), epochs);
        if epochs == 0 {
            prop_assert_eq!(out.log.optimal_epoch, 0);
            prop_assert_eq!(&out.optimal, &out.initial);
        }
    }
}
