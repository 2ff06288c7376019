use pathaug::gbm::{
    fit_data, fit_traced, load_model, mae, predict, save_model, Node, TrainConfig, TrainingData,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

/// Noisy nonlinear target over three features, with some repeated values.
fn dataset(n: usize, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut y = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.random_range(0.0..10.0);
        let b: f64 = f64::from(rng.random_range(0..5u8));
        let c: f64 = rng.random_range(-1.0..1.0);
        y.push(3.0 * a.sin() + b * b - 2.0 * c + rng.random_range(-0.5..0.5));
        cols[0].push(a);
        cols[1].push(b);
        cols[2].push(c);
    }
    TrainingData::new(names(3), cols, y).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_trees: 40,
        learning_rate: 0.3,
        max_depth: 4,
        min_samples_leaf: 5,
        subsample: 1.0,
        seed,
        feature_names: names(3),
    }
}

fn rows(data: &TrainingData) -> Vec<Vec<f64>> {
    (0..data.n_rows()).map(|i| data.row(i)).collect()
}

#[test]
fn training_mse_never_increases() {
    let data = dataset(400, 1);
    let (_, trace) = fit_traced(&data, &small_config(0)).unwrap();
    assert_eq!(trace.len(), 41);
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
    }
    assert!(trace[40] < trace[0] * 0.2);
}

#[test]
fn additive_identity_against_manual_traversal() {
    let data = dataset(300, 2);
    let model = fit_data(&data, &small_config(0)).unwrap();
    for row in rows(&data).iter().take(50) {
        let mut sum = 0.0;
        for tree in &model.trees {
            let mut i = 0;
            loop {
                match tree.nodes[i] {
                    Node::Leaf { value } => {
                        sum += value;
                        break;
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        i = if row[feature] < threshold {
                            left
                        } else {
                            right
                        }
                    }
                }
            }
        }
        let manual = model.init + model.learning_rate * sum;
        assert!((model.predict_row(row) - manual).abs() < 1e-9);
    }
}

#[test]
fn trees_respect_depth_and_leaf_size() {
    let data = dataset(500, 3);
    let cfg = small_config(0);
    let model = fit_data(&data, &cfg).unwrap();
    for tree in &model.trees {
        assert!(tree.depth() <= cfg.max_depth);
        let mut counts = HashMap::new();
        for row in rows(&data) {
            let mut i = 0;
            while let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = tree.nodes[i]
            {
                i = if row[feature] < threshold {
                    left
                } else {
                    right
                };
            }
            *counts.entry(i).or_insert(0usize) += 1;
        }
        assert!(
            counts.values().all(|&c| c >= cfg.min_samples_leaf),
            "{counts:?}"
        );
    }
}

#[test]
fn monotone_transform_leaves_training_predictions_unchanged() {
    let data = dataset(400, 4);
    let cfg = small_config(0);
    let base = fit_data(&data, &cfg).unwrap();
    let transforms: [fn(f64) -> f64; 3] = [|x| (x / 3.0).exp(), |x| 5.0 * x - 100.0, |x| x * x * x];
    for (feature, f) in transforms.into_iter().enumerate() {
        let mut t = data.clone();
        t.map_column(feature, f);
        let model = fit_data(&t, &cfg).unwrap();
        for i in 0..data.n_rows() {
            let a = base.predict_row(&data.row(i));
            let b = model.predict_row(&t.row(i));
            assert!(
                (a - b).abs() <= 1e-9,
                "feature {feature} row {i}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn identical_models_across_thread_counts() {
    let data = dataset(600, 5);
    let cfg = TrainConfig {
        subsample: 0.7,
        ..small_config(11)
    };
    let texts: Vec<String> = [1, 2, 5]
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap();
            pool.install(|| save_model(&fit_data(&data, &cfg).unwrap()))
        })
        .collect();
    assert_eq!(texts[0], texts[1]);
    assert_eq!(texts[0], texts[2]);
}

#[test]
fn round_trip_predicts_identically() {
    let data = dataset(200, 6);
    let model = fit_data(&data, &small_config(0)).unwrap();
    let text = save_model(&model);
    let back = load_model(&text).unwrap();
    assert_eq!(save_model(&back), text);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let row = [
            rng.random_range(-5.0..15.0),
            rng.random_range(-1.0..6.0),
            rng.random_range(-2.0..2.0),
        ];
        assert_eq!(model.predict_row(&row), back.predict_row(&row));
    }
}

#[test]
fn named_features_follow_model_order() {
    let data = dataset(100, 7);
    let model = fit_data(&data, &small_config(0)).unwrap();
    let row = data.row(0);
    let named: HashMap<String, f64> = names(3).into_iter().zip(row.iter().copied()).collect();
    assert_eq!(predict(&model, &named).unwrap(), model.predict_row(&row));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_are_finite(seed in 0u64..1000, x0 in -1e6f64..1e6, x1 in -1e6f64..1e6, x2 in -1e6f64..1e6) {
        let data = dataset(60, seed);
        let model = fit_data(&data, &TrainConfig { n_trees: 5, ..small_config(seed) }).unwrap();
        prop_assert!(model.predict_row(&[x0, x1, x2]).is_finite());
    }

    #[test]
    fn mae_is_translation_invariant(v in prop::collection::vec((-200.0f64..200.0, -200.0f64..200.0), 1..50), c in -100.0f64..100.0) {
        let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let base = mae(&p, &t).unwrap();
        let ps: Vec<f64> = p.iter().map(|x| x + c).collect();
        let ts: Vec<f64> = t.iter().map(|x| x + c).collect();
        prop_assert!((mae(&ps, &ts).unwrap() - base).abs() < 1e-9);
        prop_assert!(base >= 0.0);
        prop_assert_eq!(base == 0.0, p == t);
    }
}
