use prefopt::datagen::{generate, Dataset};
use prefopt::optim::{clip_gradient, rmsprop_step, train, Checkpoint, NoObserver, TrainState};
use prefopt::{Method, PolicyTable, PreferenceTuple, ScenarioSpec, TrainConfig};
use proptest::prelude::*;

fn dataset(seed: u64) -> Dataset {
    generate(&ScenarioSpec { seed, ..ScenarioSpec::default() }).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clipping_preserves_direction(g in prop::collection::vec(-100.0f64..100.0, 1..20), max in 0.01f64..10.0) {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let mut c = g.clone();
        clip_gradient(&mut c, max);
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = g.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / (norm * cn);
        prop_assert!((cos - 1.0).abs() <= 1e-12);
        prop_assert!(cn <= max * (1.0 + 1e-12) || (cn - norm).abs() <= 1e-12);
    }

    #[test]
    fn rmsprop_matches_scalar_loop(
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..12),
        lr in 1e-4f64..1e-1,
    ) {
        let (mut p, mut acc) = (vec![0.5, -1.0, 2.0], vec![0.0; 3]);
        let (mut sp, mut sa) = (p.clone(), acc.clone());
        for g in &grads {
            rmsprop_step(&mut p, &mut acc, g, lr, 0.99, 1e-8);
            for k in 0..3 {
                sa[k] = 0.99 * sa[k] + 0.01 * g[k] * g[k];
                sp[k] -= lr * g[k] / (sa[k].sqrt() + 1e-8);
            }
            prop_assert!(acc.iter().all(|&a| a >= 0.0));
        }
        for k in 0..3 {
            prop_assert!((p[k] - sp[k]).abs() <= 1e-12);
            prop_assert!((acc[k] - sa[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_leaves_reference_frozen(seed in 0u64..1000, m in prop::sample::select(Method::ALL.to_vec())) {
        let ds = dataset(seed);
        let reference = PolicyTable::uniform(ds.num_queries, ds.num_responses, true).unwrap();
        let snapshot = reference.clone();
        let config = TrainConfig {
            method: m,
            lambda: if m.is_refined() { 0.5 } else { 0.0 },
            steps: 60,
            seed,
            ..TrainConfig::default()
        };
        let a = train(&config, &ds, &reference, None, 20, &mut NoObserver).unwrap();
        let b = train(&config, &ds, &reference, None, 20, &mut NoObserver).unwrap();
        prop_assert_eq!(a.policy.logits(), b.policy.logits());
        prop_assert_eq!(&a.rms_accumulator, &b.rms_accumulator);
        prop_assert!(a.rms_accumulator.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(reference.logits(), snapshot.logits());
    }
}

#[test]
fn zero_steps_return_the_reference() {
    let ds = dataset(1);
    let reference = PolicyTable::uniform(ds.num_queries, ds.num_responses, true).unwrap();
    let mut seen = Vec::new();
    let mut observer = |cp: &Checkpoint, _: &TrainState| {
        seen.push(cp.step);
        Ok(())
    };
    let state = train(&TrainConfig { steps: 0, ..TrainConfig::default() }, &ds, &reference, None, 10, &mut observer).unwrap();
    assert_eq!(state.policy.logits(), reference.logits());
    assert_eq!(seen, vec![0]);
}

#[test]
fn two_response_separable_dataset_is_learned() {
    let tuple = PreferenceTuple { query: 0, y_pos: 1, y_neg: 0, true_gap: Some(1.0), judge_scores: None };
    let ds = Dataset::new(1, 2, vec![tuple]).unwrap();
    let reference = PolicyTable::uniform(1, 2, false).unwrap();
    let config = TrainConfig { steps: 500, learning_rate: 1e-2, ..TrainConfig::default() };
    let mut last = 0.0;
    let mut observer = |cp: &Checkpoint, _: &TrainState| {
        last = cp.metrics.accuracy;
        Ok(())
    };
    train(&config, &ds, &reference, None, 100, &mut observer).unwrap();
    assert_eq!(last, 1.0);
}

#[test]
fn windowed_loss_mostly_descends() {
    let mut fractions = Vec::new();
    for seed in 0..5 {
        let ds = dataset(40 + seed);
        let reference = PolicyTable::uniform(ds.num_queries, ds.num_responses, true).unwrap();
        let mut losses = Vec::new();
        let mut observer = |cp: &Checkpoint, _: &TrainState| {
            if cp.step > 0 {
                losses.push(cp.loss);
            }
            Ok(())
        };
        let config = TrainConfig { seed, ..TrainConfig::default() };
        train(&config, &ds, &reference, None, 1, &mut observer).unwrap();
        let windows: Vec<f64> = losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        let pairs = windows.windows(2).count();
        let down = windows.windows(2).filter(|w| w[1] <= w[0]).count();
        fractions.push(down as f64 / pairs as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean >= 0.9, "descending window fractions {fractions:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = dataset(2);
    let reference = PolicyTable::uniform(ds.num_queries, ds.num_responses, true).unwrap();
    let bad = [
        TrainConfig { lambda: 0.3, ..TrainConfig::default() },
        TrainConfig { beta: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { rmsprop_decay: 1.0, ..TrainConfig::default() },
        TrainConfig { grad_clip_norm: Some(-1.0), ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(train(&c, &ds, &reference, None, 10, &mut NoObserver), Err(prefopt::Error::Config(_))), "{c:?}");
    }
    let mut trainable = reference.clone();
    trainable.set_trainable(true);
    assert!(train(&TrainConfig::default(), &ds, &trainable, None, 10, &mut NoObserver).is_err());
}
