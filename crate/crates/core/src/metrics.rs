//! Evaluation metrics: margins, accuracies, correlation with an external
//! quality signal, and a simulated pairwise judge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::policy::{ContextId, PolicyTable, ResponseId};
use crate::reward::GroundTruth;

/// Metrics of one policy on one dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_marginal: f64,
    pub accuracy: f64,
    /// `None` when the policy has no augmented contexts.
    pub aug_accuracy: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub win_rate: Option<f64>,
    pub tie_rate: Option<f64>,
    pub lose_rate: Option<f64>,
}

/// Unscaled log-ratio margins of every tuple, on the raw query or on its
/// augmented context.
pub fn tuple_margins(
    pi: &PolicyTable,
    reference: &PolicyTable,
    dataset: &Dataset,
    augmented: bool,
) -> Result<Vec<f64>> {
    pi.check_same_shape(reference)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset
        .tuples
        .iter()
        .map(|t| {
            let c = ContextId {
                index: t.query,
                augmented,
            };
            let pos = pi.log_prob(c, t.y_pos)? - reference.log_prob(c, t.y_pos)?;
            let neg = pi.log_prob(c, t.y_neg)? - reference.log_prob(c, t.y_neg)?;
            Ok(pos - neg)
        })
        .collect()
}

/// Mean log-ratio margin. `beta = None` gives the unscaled margin; `Some(b)`
/// scales it into an implicit reward difference.
pub fn average_marginal(
    pi: &PolicyTable,
    reference: &PolicyTable,
    dataset: &Dataset,
    beta: Option<f64>,
) -> Result<f64> {
    let margins = tuple_margins(pi, reference, dataset, false)?;
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    Ok(beta.map_or(mean, |b| b * mean))
}

/// Fraction of tuples with a strictly positive margin. Zero margins count as
/// failures.
pub fn accuracy(pi: &PolicyTable, reference: &PolicyTable, dataset: &Dataset, augmented: bool) -> Result<f64> {
    let margins = tuple_margins(pi, reference, dataset, augmented)?;
    Ok(fraction_positive(&margins))
}

pub fn fraction_positive(margins: &[f64]) -> f64 {
    margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64
}

/// Margins, accuracies and, when every tuple carries a quality gap, the
/// correlation triple.
pub fn evaluate_report(pi: &PolicyTable, reference: &PolicyTable, dataset: &Dataset) -> Result<MetricsReport> {
    let margins = tuple_margins(pi, reference, dataset, false)?;
    let aug_accuracy = if pi.has_augmentation() {
        Some(fraction_positive(&tuple_margins(pi, reference, dataset, true)?))
    } else {
        None
    };
    let gaps: Option<Vec<f64>> = dataset.tuples.iter().map(|t| t.quality_gap()).collect();
    let corr = match gaps {
        Some(g) if g.len() >= 3 => correlations(&margins, &g)?,
        _ => Correlations::default(),
    };
    Ok(MetricsReport {
        avg_marginal: margins.iter().sum::<f64>() / margins.len() as f64,
        accuracy: fraction_positive(&margins),
        aug_accuracy,
        pearson: corr.pearson,
        spearman: corr.spearman,
        kendall_tau: corr.kendall_tau,
        ..MetricsReport::default()
    })
}

/// Pearson, Spearman and Kendall tau-b. A coefficient is `None` when either
/// input has no variance (in values, ranks or pair orderings respectively).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau: Option<f64>,
}

pub fn correlations(margins: &[f64], gaps: &[f64]) -> Result<Correlations> {
    if margins.len() != gaps.len() {
        return Err(Error::Argument(format!(
            "{} margins but {} gaps",
            margins.len(),
            gaps.len()
        )));
    }
    if margins.len() < 3 {
        return Err(Error::Argument(format!(
            "correlations need at least 3 points, got {}",
            margins.len()
        )));
    }
    if margins.iter().chain(gaps).any(|v| !v.is_finite()) {
        return Err(Error::Domain("correlation inputs must be finite".into()));
    }
    Ok(Correlations {
        pearson: pearson(margins, gaps),
        spearman: spearman(margins, gaps),
        kendall_tau: kendall_tau_b(margins, gaps),
    })
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(data: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data[i].total_cmp(&data[j]));
    let mut ranks = vec![0.0; data.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && data[order[end]] == data[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Rank correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Tie-corrected Kendall tau (tau-b), in `O(n log n)`.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(y[i].total_cmp(&y[j])));

    let pairs = |t: u64| t * t.saturating_sub(1) / 2;
    let total = pairs(n as u64);

    // Ties in x, and joint ties in (x, y), from runs of the sorted order.
    let (mut tied_x, mut tied_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                tied_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tied_x += pairs(run_x);
            tied_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tied_x += pairs(run_x);
    tied_xy += pairs(run_xy);

    // Discordant pairs are the inversions of y in x-order.
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let discordant = count_inversions(&mut ys, &mut buf);

    // ys is now sorted: ties in y
    let mut tied_y = 0u64;
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            tied_y += pairs(run);
            run = 1;
        }
    }
    tied_y += pairs(run);

    let denom_x = total - tied_x;
    let denom_y = total - tied_y;
    if denom_x == 0 || denom_y == 0 {
        return None;
    }
    let numerator = total as f64 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * discordant as f64;
    Some((numerator / ((denom_x as f64).sqrt() * (denom_y as f64).sqrt())).clamp(-1.0, 1.0))
}

/// Merge sort counting strict inversions.
fn count_inversions(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        count_inversions(left, bl) + count_inversions(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            count += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    count
}

/// How a policy picks its response for the judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Argmax,
    /// Categorical draw. Both policies share the random stream of each query.
    Sample(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub win: f64,
    pub tie: f64,
    pub lose: f64,
}

fn pick_response(policy: &PolicyTable, query: usize, mode: JudgeMode) -> Result<ResponseId> {
    let row = policy.row_of(ContextId::base(query))?;
    match mode {
        JudgeMode::Argmax => {
            let logits = policy.row(row);
            let mut best = 0;
            for (y, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = y;
                }
            }
            Ok(best)
        }
        JudgeMode::Sample(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(query as u64);
            let dist = WeightedIndex::new(policy.probs(row))
                .map_err(|e| Error::Domain(format!("cannot sample query {query}: {e}")))?;
            Ok(dist.sample(&mut rng))
        }
    }
}

/// Win/tie/lose rates of `policy_a` against `policy_b`, scored by the
/// quantized ground truth.
pub fn judge_compare(
    policy_a: &PolicyTable,
    policy_b: &PolicyTable,
    gt: &GroundTruth,
    queries: &[usize],
    mode: JudgeMode,
) -> Result<JudgeOutcome> {
    if queries.is_empty() {
        return Err(Error::Argument("judge needs at least one query".into()));
    }
    let (mut win, mut tie, mut lose) = (0usize, 0usize, 0usize);
    for &q in queries {
        if q >= gt.num_queries() {
            return Err(Error::Index {
                dimension: "query",
                index: q,
                size: gt.num_queries(),
            });
        }
        let a = gt.judge_score(q, pick_response(policy_a, q, mode)?);
        let b = gt.judge_score(q, pick_response(policy_b, q, mode)?);
        match a.total_cmp(&b) {
            std::cmp::Ordering::Greater => win += 1,
            std::cmp::Ordering::Equal => tie += 1,
            std::cmp::Ordering::Less => lose += 1,
        }
    }
    let n = queries.len() as f64;
    Ok(JudgeOutcome {
        win: win as f64 / n,
        tie: tie as f64 / n,
        lose: lose as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::PreferenceTuple;

    fn tuple(query: usize, y_pos: usize, y_neg: usize) -> PreferenceTuple {
        PreferenceTuple {
            query,
            y_pos,
            y_neg,
            true_gap: None,
            judge_scores: None,
        }
    }

    #[test]
    fn reference_has_zero_margin_and_accuracy() {
        let t = PolicyTable::uniform(2, 3, true).unwrap();
        let ds = Dataset::new(2, 3, vec![tuple(0, 0, 1), tuple(1, 2, 0)]).unwrap();
        assert_eq!(average_marginal(&t, &t, &ds, None).unwrap(), 0.0);
        assert_eq!(accuracy(&t, &t, &ds, false).unwrap(), 0.0);
        assert_eq!(accuracy(&t, &t, &ds, true).unwrap(), 0.0);
    }

    #[test]
    fn hand_set_log_ratios() {
        // log-ratio of y0 is 2, of y1 is 0.5 (both rows share the same normalizer shift)
        let reference = PolicyTable::from_rows(vec![], vec![vec![0.0, 0.0, 0.0]]).unwrap();
        let pi = PolicyTable::from_rows(vec![], vec![vec![2.0, 0.5, 0.0]]).unwrap();
        let ds = Dataset::new(1, 3, vec![tuple(0, 0, 1)]).unwrap();
        let m = average_marginal(&pi, &reference, &ds, None).unwrap();
        assert!((m - 1.5).abs() < 1e-14);
        let scaled = average_marginal(&pi, &reference, &ds, Some(0.1)).unwrap();
        assert!((scaled - 0.15).abs() < 1e-14);
    }

    #[test]
    fn accuracy_counts_strict_wins() {
        assert_eq!(fraction_positive(&[1.0, 1.0, -1.0, 0.0]), 0.5);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let t = PolicyTable::uniform(1, 2, false).unwrap();
        let ds = Dataset {
            num_queries: 1,
            num_responses: 2,
            tuples: vec![],
        };
        assert!(matches!(average_marginal(&t, &t, &ds, None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn perfect_agreement_and_reversal() {
        let g = [0.3, 1.2, -0.4, 2.2, 0.9];
        let c = correlations(&g, &g).unwrap();
        for v in [c.pearson, c.spearman, c.kendall_tau] {
            assert!((v.unwrap() - 1.0).abs() < 1e-15);
        }
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let c = correlations(&neg, &g).unwrap();
        for v in [c.pearson, c.spearman, c.kendall_tau] {
            assert!((v.unwrap() + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_variance_is_undefined_not_error() {
        let c = correlations(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(c, Correlations::default());
    }

    #[test]
    fn short_or_mismatched_inputs_are_errors() {
        assert!(correlations(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(correlations(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn identical_policies_always_tie() {
        let gt = GroundTruth::new(vec![vec![0.0, 1.0, 2.0], vec![2.0, 0.5, 1.0]], 1.0).unwrap();
        let p = PolicyTable::from_rows(vec![], vec![vec![0.1, 0.9, 0.3], vec![1.0, 0.0, 0.2]]).unwrap();
        for mode in [JudgeMode::Argmax, JudgeMode::Sample(9)] {
            let o = judge_compare(&p, &p, &gt, &[0, 1], mode).unwrap();
            assert_eq!(o.tie, 1.0);
        }
    }

    #[test]
    fn oracle_policy_beats_uniform() {
        // response 0 is worst everywhere and quantized scores are distinct
        let gt = GroundTruth::new(vec![vec![0.0, 5.0, 2.0], vec![0.0, 3.0, 4.0]], 1.0).unwrap();
        let oracle = PolicyTable::from_rows(vec![], gt.rewards.clone()).unwrap();
        let uniform = PolicyTable::uniform(2, 3, false).unwrap();
        let o = judge_compare(&oracle, &uniform, &gt, &[0, 1], JudgeMode::Argmax).unwrap();
        assert_eq!(o.win, 1.0);
        let swapped = judge_compare(&uniform, &oracle, &gt, &[0, 1], JudgeMode::Argmax).unwrap();
        assert_eq!((swapped.win, swapped.tie, swapped.lose), (o.lose, o.tie, o.win));
    }
}
