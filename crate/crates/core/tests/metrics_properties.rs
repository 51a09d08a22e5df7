mod common;

use prefopt::datagen::Dataset;
use prefopt::metrics::{accuracy, correlations, judge_compare, kendall_tau_b, pearson, spearman, tuple_margins, JudgeMode};
use prefopt::{GroundTruth, PolicyTable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        // Small integer grids force plenty of ties.
        let v = prop::collection::vec((-4i32..5).prop_map(f64::from), n);
        (v.clone(), v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn correlations_match_brute_force((x, y) in paired()) {
        prop_assert!(close(pearson(&x, &y), common::brute_pearson(&x, &y), 1e-10));
        prop_assert!(close(spearman(&x, &y), common::brute_spearman(&x, &y), 1e-10));
        prop_assert!(close(kendall_tau_b(&x, &y), common::brute_kendall(&x, &y), 1e-10));
        for r in [pearson(&x, &y), spearman(&x, &y), kendall_tau_b(&x, &y)].into_iter().flatten() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }

    #[test]
    fn pearson_is_affine_invariant((x, y) in paired(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let z: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!(close(pearson(&z, &y), pearson(&x, &y), 1e-9));
    }

    #[test]
    fn rank_correlations_ignore_monotone_maps((x, y) in paired()) {
        let z: Vec<f64> = x.iter().map(|v| v.powi(3) + (v / 3.0).exp()).collect();
        prop_assert!(close(spearman(&z, &y), spearman(&x, &y), 1e-10));
        prop_assert!(close(kendall_tau_b(&z, &y), kendall_tau_b(&x, &y), 1e-10));
    }

    #[test]
    fn accuracy_is_the_mean_indicator(seed: u64, q in 1usize..4, n in 2usize..6, size in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = common::random_table(&mut rng, q, n, 3.0);
        let reference = common::random_table(&mut rng, q, n, 3.0);
        let ds = Dataset::new(q, n, common::random_batch(&mut rng, q, n, size)).unwrap();
        let l = common::Layout::of(&pi);
        let (p, r) = (pi.logits(), reference.logits());
        let oracle: Vec<f64> = ds.tuples.iter().map(|t| l.margin(p, r, t.query, t.y_pos, t.y_neg)).collect();
        let margins = tuple_margins(&pi, &reference, &ds, false).unwrap();
        prop_assert!(common::max_abs(&margins, &oracle) <= 1e-12);
        let want = oracle.iter().filter(|&&m| m > 0.0).count() as f64 / oracle.len() as f64;
        prop_assert_eq!(accuracy(&pi, &reference, &ds, false).unwrap(), want);
    }

    #[test]
    fn judge_rates_are_symmetric(seed: u64, q in 1usize..6, n in 2usize..6, sample: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_table(&mut rng, q, n, 3.0);
        let b = common::random_table(&mut rng, q, n, 3.0);
        let rewards: Vec<Vec<f64>> = (0..q).map(|_| (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).collect();
        let gt = GroundTruth::new(rewards, 1.0).unwrap();
        let queries: Vec<usize> = (0..q).collect();
        let mode = if sample { JudgeMode::Sample(seed) } else { JudgeMode::Argmax };
        let ab = judge_compare(&a, &b, &gt, &queries, mode).unwrap();
        let ba = judge_compare(&b, &a, &gt, &queries, mode).unwrap();
        prop_assert!((ab.win + ab.tie + ab.lose - 1.0).abs() <= 1e-12);
        prop_assert_eq!(ab.win, ba.lose);
        prop_assert_eq!(ab.tie, ba.tie);
        let aa = judge_compare(&a, &a, &gt, &queries, mode).unwrap();
        prop_assert_eq!(aa.tie, 1.0);
    }
}

#[test]
fn fixed_vectors_match_brute_force() {
    for (x, y) in common::fixed_vectors() {
        let c = correlations(&x, &y).unwrap();
        assert!(close(c.pearson, common::brute_pearson(&x, &y), 1e-12));
        assert!(close(c.spearman, common::brute_spearman(&x, &y), 1e-12));
        assert!(close(c.kendall_tau, common::brute_kendall(&x, &y), 1e-12));
    }
}

#[test]
fn degenerate_inputs_have_no_correlation() {
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert_eq!(kendall_tau_b(&[1.0], &[2.0]), None);
    assert!(correlations(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn identical_policies_score_zero_accuracy() {
    let p = PolicyTable::uniform(2, 3, true).unwrap();
    let ds = Dataset::new(2, 3, common::random_batch(&mut ChaCha8Rng::seed_from_u64(0), 2, 3, 10)).unwrap();
    assert_eq!(accuracy(&p, &p, &ds, false).unwrap(), 0.0);
}
