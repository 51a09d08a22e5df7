use prefopt::datagen::{generate, load_jsonl, Dataset};
use prefopt::reward::sigmoid;
use prefopt::{Error, GroundTruth, RewardDistribution, ScenarioSpec};
use proptest::prelude::*;

fn distribution() -> impl Strategy<Value = RewardDistribution> {
    prop_oneof![
        (-2.0f64..0.0, 0.5f64..3.0).prop_map(|(lo, w)| RewardDistribution::Uniform { lo, hi: lo + w }),
        (-1.0f64..1.0, 0.1f64..2.0).prop_map(|(mu, sigma)| RewardDistribution::Gaussian { mu, sigma }),
        (0.05f64..0.5, 1.0f64..3.0, 0.1f64..0.9)
            .prop_map(|(gap_small, gap_large, mix)| RewardDistribution::TwoCluster { gap_small, gap_large, mix }),
    ]
}

fn spec() -> impl Strategy<Value = ScenarioSpec> {
    (1usize..6, 4usize..9, distribution(), 1usize..10, any::<u64>()).prop_map(|(q, n, d, t, seed)| ScenarioSpec {
        num_queries: q,
        num_responses: n,
        reward_distribution: d,
        tuples_per_query: t,
        seed,
        ..ScenarioSpec::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noiseless_labels_follow_the_reward(spec in spec()) {
        let (gt, ds) = generate(&spec).unwrap();
        prop_assert_eq!(ds.len(), spec.num_queries * spec.tuples_per_query);
        for t in &ds.tuples {
            prop_assert!(t.y_pos != t.y_neg);
            let gap = gt.reward(t.query, t.y_pos) - gt.reward(t.query, t.y_neg);
            prop_assert!(gap > 0.0);
            prop_assert_eq!(t.true_gap, Some(gap));
            let (a, b) = t.judge_scores.unwrap();
            prop_assert!(a >= b);
        }
        for q in 0..spec.num_queries {
            prop_assert_eq!(ds.tuples.iter().filter(|t| t.query == q).count(), spec.tuples_per_query);
        }
    }

    #[test]
    fn generation_is_reproducible(spec in spec()) {
        let (g1, d1) = generate(&spec).unwrap();
        let (g2, d2) = generate(&spec).unwrap();
        prop_assert_eq!(d1.to_jsonl().unwrap(), d2.to_jsonl().unwrap());
        prop_assert_eq!(g1.to_json().unwrap(), g2.to_json().unwrap());
    }

    #[test]
    fn jsonl_round_trips(spec in spec()) {
        let (_, ds) = generate(&spec).unwrap();
        let back = Dataset::parse_jsonl(&ds.to_jsonl().unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, ds) = generate(&ScenarioSpec { seed: 9, ..ScenarioSpec::default() }).unwrap();
    let data = dir.path().join("d.jsonl");
    let truth = dir.path().join("gt.json");
    ds.write_jsonl(&data).unwrap();
    gt.save(&truth).unwrap();
    assert_eq!(load_jsonl(&data).unwrap(), ds);
    assert_eq!(GroundTruth::load(&truth).unwrap(), gt);
}

#[test]
fn different_seeds_differ() {
    let a = generate(&ScenarioSpec { seed: 1, ..ScenarioSpec::default() }).unwrap().1;
    let b = generate(&ScenarioSpec { seed: 2, ..ScenarioSpec::default() }).unwrap().1;
    assert_ne!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
}

#[test]
fn two_cluster_mix_controls_large_gap_fraction() {
    let (gap_small, gap_large) = (0.1, 3.0);
    let spec = ScenarioSpec {
        num_queries: 50,
        num_responses: 8,
        reward_distribution: RewardDistribution::TwoCluster { gap_small, gap_large, mix: 0.5 },
        tuples_per_query: 40,
        seed: 3,
        ..ScenarioSpec::default()
    };
    let (_, ds) = generate(&spec).unwrap();
    let large = ds.tuples.iter().filter(|t| t.true_gap.unwrap() > gap_large - gap_small).count();
    for t in &ds.tuples {
        let g = t.true_gap.unwrap();
        assert!(g <= gap_small || g > gap_large - gap_small, "gap {g} between clusters");
    }
    let fraction = large as f64 / ds.len() as f64;
    assert!((fraction - 0.5).abs() <= 0.05, "large-gap fraction {fraction}");
}

#[test]
fn noisy_labels_flip_at_the_bradley_terry_rate() {
    let spec = ScenarioSpec {
        num_queries: 100,
        num_responses: 6,
        reward_distribution: RewardDistribution::Gaussian { mu: 0.0, sigma: 1.0 },
        label_noise: 0.1,
        tuples_per_query: 50,
        seed: 11,
        ..ScenarioSpec::default()
    };
    let (gt, ds) = generate(&spec).unwrap();
    let mut flips = 0usize;
    let mut expected = 0.0;
    for t in &ds.tuples {
        let gap = gt.reward(t.query, t.y_pos) - gt.reward(t.query, t.y_neg);
        if gap < 0.0 {
            flips += 1;
        }
        expected += sigmoid(-gap.abs());
    }
    let (rate, expected) = (flips as f64 / ds.len() as f64, expected / ds.len() as f64);
    assert!((rate - expected).abs() <= 0.03, "flip rate {rate}, expected {expected}");

    let flat = ScenarioSpec {
        reward_distribution: RewardDistribution::Uniform { lo: 0.0, hi: 1e-9 },
        ..spec
    };
    let (gt, ds) = generate(&flat).unwrap();
    let flips = ds.tuples.iter().filter(|t| gt.reward(t.query, t.y_pos) < gt.reward(t.query, t.y_neg)).count();
    let rate = flips as f64 / ds.len() as f64;
    assert!((rate - 0.5).abs() <= 0.03, "flat flip rate {rate}");
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        ScenarioSpec { num_queries: 0, ..ScenarioSpec::default() },
        ScenarioSpec { num_responses: 1, ..ScenarioSpec::default() },
        ScenarioSpec { tuples_per_query: 0, ..ScenarioSpec::default() },
        ScenarioSpec { label_noise: 0.5, ..ScenarioSpec::default() },
        ScenarioSpec { prompt_gain: -1.0, ..ScenarioSpec::default() },
        ScenarioSpec {
            reward_distribution: RewardDistribution::TwoCluster { gap_small: 1.0, gap_large: 0.5, mix: 0.5 },
            ..ScenarioSpec::default()
        },
    ];
    for s in bad {
        assert!(matches!(generate(&s), Err(Error::Argument(_))), "{s:?}");
    }
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_jsonl(&dir.path().join("missing.jsonl")).is_err());
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(load_jsonl(&path).is_err());
    assert!(Dataset::parse_jsonl("").is_err());
}
