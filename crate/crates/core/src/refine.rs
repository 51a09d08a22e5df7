//! Refinement functions and their checkable properties.
//!
//! Argument order follows the training code: `delta_*(.., y_pos, y_neg, ..)`
//! measures how much better `y_pos` looks than `y_neg`. In the conventional
//! `Delta(y_neg, y_pos; x)` notation the negative response comes first; the
//! value is the same.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{implicit_reward_diff, ContextId, PolicyTable, ResponseId};
use crate::reward::GroundTruth;

/// A refinement value together with its gradient participation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementValue {
    pub delta: f64,
    /// When set, no loss gradient flows through `delta`.
    pub detached: bool,
}

impl RefinementValue {
    /// The same value, participating in gradients.
    pub fn attached(self) -> Self {
        Self {
            detached: false,
            ..self
        }
    }
}

fn require_base(x: ContextId, what: &str) -> Result<()> {
    if x.augmented {
        return Err(Error::Argument(format!(
            "{what} is defined on base queries, got augmented context {}",
            x.index
        )));
    }
    Ok(())
}

/// Refinement from the raw query's own implicit reward.
///
/// Subtracting `lambda` times this from the DPO margin only rescales beta to
/// `beta * (1 - lambda)`; see [`crate::loss::sr_dpo_naive_degeneracy`].
pub fn delta_naive(
    pi: &PolicyTable,
    reference: &PolicyTable,
    x: ContextId,
    y_pos: ResponseId,
    y_neg: ResponseId,
    beta: f64,
) -> Result<f64> {
    require_base(x, "naive refinement")?;
    implicit_reward_diff(pi, reference, x, y_pos, y_neg, beta)
}

/// Prompt-augmented refinement: the implicit reward difference of
/// `(y_pos, y_neg)` evaluated on `aug(x)`. Detached by default.
pub fn delta_refine(
    pi: &PolicyTable,
    reference: &PolicyTable,
    x: ContextId,
    y_pos: ResponseId,
    y_neg: ResponseId,
    beta: f64,
) -> Result<RefinementValue> {
    require_base(x, "prompt refinement")?;
    if !pi.has_augmentation() {
        return Err(Error::Config(
            "prompt refinement needs an augmented context for every query".into(),
        ));
    }
    let delta = implicit_reward_diff(pi, reference, x.aug(), y_pos, y_neg, beta)?;
    Ok(RefinementValue {
        delta,
        detached: true,
    })
}

/// Residual of the anchor decomposition for an arbitrary refinement `delta`
/// (called as `delta(y_pos, y_neg)`).
pub fn telescoping_residual<F>(delta: F, y_pos: ResponseId, y_neg: ResponseId, y_star: ResponseId) -> f64
where
    F: Fn(ResponseId, ResponseId) -> f64,
{
    let direct = delta(y_pos, y_neg);
    let via_anchor = delta(y_star, y_neg) - delta(y_star, y_pos);
    (direct - via_anchor).abs()
}

/// `|Delta(y-, y+) - (Delta(y-, y*) - Delta(y+, y*))|` for the prompt
/// refinement. Holds for every anchor `y_star`.
pub fn check_telescoping(
    pi: &PolicyTable,
    reference: &PolicyTable,
    x: ContextId,
    y_pos: ResponseId,
    y_neg: ResponseId,
    y_star: ResponseId,
    beta: f64,
) -> Result<f64> {
    pi.check_response(y_star)?;
    // Validates indices once; the closure below cannot fail afterwards.
    delta_refine(pi, reference, x, y_pos, y_neg, beta)?;
    Ok(telescoping_residual(
        |a, b| {
            delta_refine(pi, reference, x, a, b, beta)
                .map(|v| v.delta)
                .unwrap_or(f64::NAN)
        },
        y_pos,
        y_neg,
        y_star,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// `r*(a) > r*(b)` but `Delta(b, a)` is not positive.
    SignAgreement,
    /// `r*(a) > r*(b)` but `Delta(a, y*) < Delta(b, y*)` fails.
    AnchorOrdering,
    /// Two tuples meeting the pair-of-pairs hypotheses whose true-gap
    /// ordering disagrees with their refinement ordering.
    GapOrdering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub query: usize,
    /// `[better, worse]` for pair checks; `[i_pos, i_neg, j_pos, j_neg]` for
    /// pair-of-pairs checks.
    pub responses: Vec<ResponseId>,
    pub detail: String,
}

/// Outcome of the exhaustive ordering checks on one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub query: usize,
    pub anchor: ResponseId,
    pub pairs_checked: usize,
    pub pair_pairs_checked: usize,
    pub violations: Vec<Violation>,
}

impl MonotoneReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Exhaustive check that the prompt refinement orders responses and tuples
/// the way `r*` does on query `x`. Tied rewards are skipped.
pub fn check_monotone_equivalence(
    gt: &GroundTruth,
    pi: &PolicyTable,
    reference: &PolicyTable,
    x: ContextId,
    beta: f64,
) -> Result<MonotoneReport> {
    let n = pi.num_responses();
    let mut table = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            table[a * n + b] = delta_refine(pi, reference, x, a, b, beta)?.delta;
        }
    }
    check_monotone_equivalence_with(gt, x.index, n, |a, b| table[a * n + b])
}

/// [`check_monotone_equivalence`] for an arbitrary refinement `delta(y_pos, y_neg)`.
pub fn check_monotone_equivalence_with<F>(
    gt: &GroundTruth,
    query: usize,
    num_responses: usize,
    delta: F,
) -> Result<MonotoneReport>
where
    F: Fn(ResponseId, ResponseId) -> f64,
{
    if query >= gt.num_queries() {
        return Err(Error::Index {
            dimension: "query",
            index: query,
            size: gt.num_queries(),
        });
    }
    if gt.num_responses() != num_responses {
        return Err(Error::Config(format!(
            "ground truth has {} responses, policy has {num_responses}",
            gt.num_responses()
        )));
    }
    let r = &gt.rewards[query];
    let anchor = gt.best_response(query);
    let mut report = MonotoneReport {
        query,
        anchor,
        pairs_checked: 0,
        pair_pairs_checked: 0,
        violations: Vec::new(),
    };

    // Strictly ordered (better, worse) pairs.
    let mut tuples = Vec::new();
    for a in 0..num_responses {
        for b in 0..num_responses {
            if r[a] > r[b] {
                tuples.push((a, b));
            }
        }
    }

    for &(better, worse) in &tuples {
        report.pairs_checked += 1;
        let d = delta(better, worse);
        if d <= 0.0 {
            report.violations.push(Violation {
                kind: ViolationKind::SignAgreement,
                query,
                responses: vec![better, worse],
                detail: format!("r* gap {} but refinement {d}", r[better] - r[worse]),
            });
        }
        // Distance of each response from the anchor.
        let d_better = delta(anchor, better);
        let d_worse = delta(anchor, worse);
        if d_better >= d_worse {
            report.violations.push(Violation {
                kind: ViolationKind::AnchorOrdering,
                query,
                responses: vec![better, worse],
                detail: format!(
                    "anchor {anchor}: Delta(better, y*) = {d_better} not below Delta(worse, y*) = {d_worse}"
                ),
            });
        }
    }

    for &(i_pos, i_neg) in &tuples {
        for &(j_pos, j_neg) in &tuples {
            if !(r[i_pos] > r[j_pos] && r[i_neg] < r[j_neg]) {
                continue;
            }
            report.pair_pairs_checked += 1;
            let gap_i = r[i_pos] - r[i_neg];
            let gap_j = r[j_pos] - r[j_neg];
            let delta_i = delta(i_pos, i_neg);
            let delta_j = delta(j_pos, j_neg);
            if (gap_i > gap_j) != (delta_i > delta_j) {
                report.violations.push(Violation {
                    kind: ViolationKind::GapOrdering,
                    query,
                    responses: vec![i_pos, i_neg, j_pos, j_neg],
                    detail: format!(
                        "gaps {gap_i} vs {gap_j} but refinements {delta_i} vs {delta_j}"
                    ),
                });
            }
        }
    }
    Ok(report)
}
