use evgraph::datagen::{build_baseline_graph, generate_synthetic, BaselineParams, Dataset, Informativeness, SynthSpec};
use evgraph::graph::GraphKind;
use evgraph::metrics::{accuracy, argmax_rows};
use evgraph::train::{fit, predict, GraphInput, LabelMask, Population, Split, TrainConfig, Trained};
use evgraph::{Error, Matrix};

fn small_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        layers: 2,
        hidden_width: 8,
        latent_dim: 16,
        predictor_hidden: 32,
        ..Default::default()
    }
}

fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic(&SynthSpec {
        n_subjects: 40,
        feature_dim: 8,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn train(d: &Dataset, mask: &LabelMask, input: &GraphInput, config: &TrainConfig) -> Trained {
    let population = Population {
        features: &d.features,
        metadata: &d.metadata,
        mask,
        classes: d.n_classes,
    };
    fit(population, input, config).unwrap()
}

#[test]
fn loss_decreases_on_tiny_problem() {
    let d = small_dataset(1);
    let t = train(&d, &d.label_mask().unwrap(), &GraphInput::Adaptive, &small_config(50, 1));
    assert_eq!(t.history.len(), 50);
    let head: f64 = t.history[..5].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    let tail: f64 = t.history[45..].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "loss went from {head} to {tail}");
    assert!(t.history.iter().all(|r| r.train_loss.is_finite()));
    assert!(t.history.iter().all(|r| r.val_accuracy.is_some()));
    assert_eq!(t.history[0].epoch, 1);
}

#[test]
fn same_seed_same_run() {
    let d = small_dataset(2);
    let mask = d.label_mask().unwrap();
    let a = train(&d, &mask, &GraphInput::Adaptive, &small_config(15, 7));
    let b = train(&d, &mask, &GraphInput::Adaptive, &small_config(15, 7));
    assert_eq!(a, b);
    let c = train(&d, &mask, &GraphInput::Adaptive, &small_config(15, 8));
    assert_ne!(a.params, c.params);
}

#[test]
fn test_labels_never_reach_the_parameters() {
    let d = small_dataset(3);
    let mask = d.label_mask().unwrap();
    let mut flipped = d.labels.clone();
    let test = mask.indices(Split::Test);
    assert!(!test.is_empty());
    for &i in &test {
        flipped[i] = flipped[i].map(|c| 1 - c);
    }
    let flipped_mask = LabelMask::new(flipped, d.splits.clone()).unwrap();
    for input in [
        GraphInput::Adaptive,
        GraphInput::Fixed(build_baseline_graph(GraphKind::Random, &d, &BaselineParams::default()).unwrap()),
    ] {
        let a = train(&d, &mask, &input, &small_config(10, 5));
        let b = train(&d, &flipped_mask, &input, &small_config(10, 5));
        assert_eq!(a, b);
    }
}

#[test]
fn fixed_graph_training_leaves_encoder_gradient_free() {
    let d = small_dataset(4);
    let graph = build_baseline_graph(GraphKind::Affinity, &d, &BaselineParams::default()).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..small_config(10, 4)
    };
    let t = train(&d, &d.label_mask().unwrap(), &GraphInput::Fixed(graph), &cfg);
    let init = evgraph::model::init_params(&t.params.dims, 4).unwrap();
    assert_eq!(t.params.pae, init.pae);
    assert_ne!(t.params.layers, init.layers);
}

#[test]
fn separable_population_is_learned() {
    let d = generate_synthetic(&SynthSpec {
        informativeness: Informativeness::Full,
        feature_noise: 0.5,
        seed: 0,
        ..Default::default()
    })
    .unwrap();
    let mask = d.label_mask().unwrap();
    let cfg = TrainConfig::default();
    let t = train(&d, &mask, &GraphInput::Adaptive, &cfg);
    let p = predict(&d.features, &d.metadata, &GraphInput::Adaptive, &t.params, &t.norm_stats, &cfg.forward_config()).unwrap();
    let acc = accuracy(&argmax_rows(&p), &mask.dense_labels(0), &mask.indices(Split::Test)).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
}

#[test]
fn no_training_labels_is_config_error() {
    let d = small_dataset(5);
    let mask = LabelMask::new(vec![None; d.len()], vec![Split::Unlabeled; d.len()]).unwrap();
    let population = Population {
        features: &d.features,
        metadata: &d.metadata,
        mask: &mask,
        classes: 2,
    };
    let err = fit(population, &GraphInput::Adaptive, &small_config(5, 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn nan_features_abort_with_numerical_error() {
    let d = small_dataset(6);
    let mut features = d.features.clone();
    features.set(0, 0, f64::NAN);
    let mask = d.label_mask().unwrap();
    let population = Population {
        features: &features,
        metadata: &d.metadata,
        mask: &mask,
        classes: 2,
    };
    let err = fit(population, &GraphInput::Adaptive, &small_config(5, 0)).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert!(err.to_string().contains("epoch 1"), "{err}");
}

#[test]
fn mismatched_graph_size_is_rejected() {
    let d = small_dataset(7);
    let other = small_dataset(8);
    let mut graph = build_baseline_graph(GraphKind::Random, &other, &BaselineParams::default()).unwrap();
    graph.node_features = Matrix::zeros(3, 3);
    graph.edge_weights = Matrix::identity(3);
    let mask = d.label_mask().unwrap();
    let population = Population {
        features: &d.features,
        metadata: &d.metadata,
        mask: &mask,
        classes: 2,
    };
    assert!(fit(population, &GraphInput::Fixed(graph), &small_config(2, 0)).is_err());
}
