//! Preference losses with exact reverse-mode gradients.
//!
//! Every loss here is a mean over tuples of a scalar function of two
//! quantities: the log-ratio margin
//! `m = [log pi(y+|x) - log ref(y+|x)] - [log pi(y-|x) - log ref(y-|x)]`
//! and, for the refined variants, a refinement `Delta`. The computation graph
//! is fixed (log-softmax rows, ratio differences, scalar reduction), so the
//! backward pass is written out by hand node by node instead of going through
//! a tape.

use serde::{Deserialize, Serialize};

use crate::datagen::PreferenceTuple;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, ContextId, PolicyTable};
use crate::reward::{log_sigmoid, sigmoid};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "ipo")]
    Ipo,
    #[serde(rename = "sr-dpo")]
    SrDpo,
    #[serde(rename = "sr-ipo")]
    SrIpo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dpo, Method::Ipo, Method::SrDpo, Method::SrIpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Ipo => "ipo",
            Method::SrDpo => "sr-dpo",
            Method::SrIpo => "sr-ipo",
        }
    }

    pub fn is_refined(self) -> bool {
        matches!(self, Method::SrDpo | Method::SrIpo)
    }

    /// The unrefined method sharing this method's objective.
    pub fn base(self) -> Method {
        match self {
            Method::Dpo | Method::SrDpo => Method::Dpo,
            Method::Ipo | Method::SrIpo => Method::Ipo,
        }
    }

    /// The refined method sharing this method's objective.
    pub fn refined(self) -> Method {
        match self {
            Method::Dpo | Method::SrDpo => Method::SrDpo,
            Method::Ipo | Method::SrIpo => Method::SrIpo,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?} (expected dpo, ipo, sr-dpo or sr-ipo)")))
    }
}

/// Per-tuple objective applied to the (possibly refined) margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `-log sigmoid(beta * m - lambda * Delta)`.
    Sigmoid,
    /// `(m - lambda * Delta - 1 / (2 beta))^2`.
    Squared,
}

/// Where the refinement value of each tuple comes from.
#[derive(Debug, Clone, Copy)]
pub enum RefinementSource<'a> {
    /// Implicit reward difference on the prompt-augmented context.
    Prompt,
    /// Implicit reward difference on the raw query (`beta * m`).
    Naive,
    /// Caller-supplied constants, one per tuple. Never differentiated.
    Fixed(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct Refinement<'a> {
    pub lambda: f64,
    pub source: RefinementSource<'a>,
    /// Treat the refinement as a constant in the backward pass.
    pub detach: bool,
}

/// Loss value, gradient with respect to `pi`'s logits and per-tuple terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatchResult {
    pub loss: f64,
    /// Row-major, same layout as [`PolicyTable::logits`].
    pub gradient: Vec<f64>,
    /// `beta * m` for every tuple.
    pub per_tuple_margin: Vec<f64>,
    /// Refinement value of every tuple (zero for unrefined losses).
    pub per_tuple_delta: Vec<f64>,
    pub per_tuple_loss: Vec<f64>,
}

impl LossBatchResult {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn check_inputs(pi: &PolicyTable, reference: &PolicyTable, batch: &[PreferenceTuple], beta: f64) -> Result<()> {
    pi.check_same_shape(reference)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!("beta must be positive, got {beta}")));
    }
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    for t in batch {
        pi.row_of(ContextId::base(t.query))?;
        pi.check_response(t.y_pos)?;
        pi.check_response(t.y_neg)?;
    }
    Ok(())
}

/// Adds the log-softmax backward of `row` (adjoint `adj` on the log-probs)
/// into `grad`, scaled by `scale`.
fn backprop_log_softmax(grad: &mut [f64], probs: &[f64], adj: &[(usize, f64)], scale: f64) {
    let total: f64 = adj.iter().map(|&(_, a)| a).sum();
    for (g, p) in grad.iter_mut().zip(probs) {
        *g -= scale * p * total;
    }
    for &(k, a) in adj {
        grad[k] += scale * a;
    }
}

/// Evaluates the mean loss and its gradient.
pub fn evaluate(
    pi: &PolicyTable,
    reference: &PolicyTable,
    batch: &[PreferenceTuple],
    objective: Objective,
    beta: f64,
    refinement: Option<Refinement<'_>>,
) -> Result<LossBatchResult> {
    check_inputs(pi, reference, batch, beta)?;
    if let Some(r) = &refinement {
        if !(r.lambda >= 0.0 && r.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be non-negative, got {}", r.lambda)));
        }
        match r.source {
            RefinementSource::Prompt if !pi.has_augmentation() => {
                return Err(Error::Config(
                    "prompt refinement needs an augmented context for every query".into(),
                ))
            }
            RefinementSource::Fixed(values) if values.len() != batch.len() => {
                return Err(Error::Argument(format!(
                    "{} fixed refinements for {} tuples",
                    values.len(),
                    batch.len()
                )))
            }
            _ => {}
        }
    }

    let n = pi.num_responses();
    let scale = 1.0 / batch.len() as f64;
    let target = 1.0 / (2.0 * beta);
    let mut gradient = vec![0.0; pi.logits().len()];
    let mut per_tuple_margin = Vec::with_capacity(batch.len());
    let mut per_tuple_delta = Vec::with_capacity(batch.len());
    let mut per_tuple_loss = Vec::with_capacity(batch.len());

    for (i, t) in batch.iter().enumerate() {
        // forward: raw query
        let row = t.query;
        let pi_lp = log_softmax(pi.row(row));
        let ref_lp = log_softmax(reference.row(row));
        let m = (pi_lp[t.y_pos] - ref_lp[t.y_pos]) - (pi_lp[t.y_neg] - ref_lp[t.y_neg]);

        // forward: refinement
        let mut aug = None;
        let (lambda, delta) = match &refinement {
            None => (0.0, 0.0),
            Some(r) => {
                let delta = match r.source {
                    RefinementSource::Prompt => {
                        let aug_row = pi.row_of(ContextId::base(t.query).aug())?;
                        let pa = log_softmax(pi.row(aug_row));
                        let ra = log_softmax(reference.row(aug_row));
                        let d = beta * ((pa[t.y_pos] - ra[t.y_pos]) - (pa[t.y_neg] - ra[t.y_neg]));
                        aug = Some(aug_row);
                        d
                    }
                    RefinementSource::Naive => beta * m,
                    RefinementSource::Fixed(values) => values[i],
                };
                (r.lambda, delta)
            }
        };

        // forward: objective, and d(loss)/d(pre-activation)
        let (loss, d_pre) = match objective {
            Objective::Sigmoid => {
                let z = beta * m - lambda * delta;
                (-log_sigmoid(z), -sigmoid(-z))
            }
            Objective::Squared => {
                let u = m - lambda * delta - target;
                (u * u, 2.0 * u)
            }
        };
        per_tuple_margin.push(beta * m);
        per_tuple_delta.push(delta);
        per_tuple_loss.push(loss);

        // backward: adjoints of m and Delta
        let mut adj_m = match objective {
            Objective::Sigmoid => beta * d_pre,
            Objective::Squared => d_pre,
        };
        let live_delta = refinement.as_ref().is_some_and(|r| !r.detach);
        let adj_delta = if live_delta { -lambda * d_pre } else { 0.0 };
        let mut adj_aug = None;
        if live_delta {
            match refinement.as_ref().map(|r| r.source) {
                Some(RefinementSource::Naive) => adj_m += beta * adj_delta,
                Some(RefinementSource::Prompt) => adj_aug = Some(beta * adj_delta),
                _ => {}
            }
        }

        // backward: log-softmax of the raw query row
        let start = row * n;
        let probs = pi.probs(row);
        backprop_log_softmax(
            &mut gradient[start..start + n],
            &probs,
            &[(t.y_pos, adj_m), (t.y_neg, -adj_m)],
            scale,
        );
        // backward: log-softmax of the augmented row
        if let (Some(aug_row), Some(a)) = (aug, adj_aug) {
            let start = aug_row * n;
            let probs = pi.probs(aug_row);
            backprop_log_softmax(
                &mut gradient[start..start + n],
                &probs,
                &[(t.y_pos, a), (t.y_neg, -a)],
                scale,
            );
        }
    }

    let loss = per_tuple_loss.iter().sum::<f64>() * scale;
    Ok(LossBatchResult {
        loss,
        gradient,
        per_tuple_margin,
        per_tuple_delta,
        per_tuple_loss,
    })
}

/// Negated DPO objective: `-mean log sigmoid(beta * m)`.
pub fn dpo_loss(pi: &PolicyTable, reference: &PolicyTable, batch: &[PreferenceTuple], beta: f64) -> Result<LossBatchResult> {
    evaluate(pi, reference, batch, Objective::Sigmoid, beta, None)
}

/// IPO loss: `mean (m - 1/(2 beta))^2`.
pub fn ipo_loss(pi: &PolicyTable, reference: &PolicyTable, batch: &[PreferenceTuple], beta: f64) -> Result<LossBatchResult> {
    evaluate(pi, reference, batch, Objective::Squared, beta, None)
}

/// Self-refined DPO: `-mean log sigmoid(beta * m - lambda * Delta)` with the
/// prompt-augmented refinement.
pub fn sr_dpo_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    batch: &[PreferenceTuple],
    beta: f64,
    lambda: f64,
    detach_delta: bool,
) -> Result<LossBatchResult> {
    evaluate(
        pi,
        reference,
        batch,
        Objective::Sigmoid,
        beta,
        Some(Refinement {
            lambda,
            source: RefinementSource::Prompt,
            detach: detach_delta,
        }),
    )
}

/// Self-refined IPO: `mean (m - lambda * Delta - 1/(2 beta))^2`. The margin
/// carries no beta; `Delta` keeps its own.
pub fn sr_ipo_loss(
    pi: &PolicyTable,
    reference: &PolicyTable,
    batch: &[PreferenceTuple],
    beta: f64,
    lambda: f64,
    detach_delta: bool,
) -> Result<LossBatchResult> {
    evaluate(
        pi,
        reference,
        batch,
        Objective::Squared,
        beta,
        Some(Refinement {
            lambda,
            source: RefinementSource::Prompt,
            detach: detach_delta,
        }),
    )
}

/// The loss a training method minimizes (refinement always detached).
pub fn method_loss(
    method: Method,
    pi: &PolicyTable,
    reference: &PolicyTable,
    batch: &[PreferenceTuple],
    beta: f64,
    lambda: f64,
) -> Result<LossBatchResult> {
    match method {
        Method::Dpo => dpo_loss(pi, reference, batch, beta),
        Method::Ipo => ipo_loss(pi, reference, batch, beta),
        Method::SrDpo => sr_dpo_loss(pi, reference, batch, beta, lambda, true),
        Method::SrIpo => sr_ipo_loss(pi, reference, batch, beta, lambda, true),
    }
}

/// Sr-DPO with the naive refinement left attached, next to plain DPO at
/// `beta * (1 - lambda)`. The two agree in value and gradient.
pub fn sr_dpo_naive_degeneracy(
    pi: &PolicyTable,
    reference: &PolicyTable,
    batch: &[PreferenceTuple],
    beta: f64,
    lambda: f64,
) -> Result<(LossBatchResult, LossBatchResult)> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Argument(format!(
            "lambda must lie in [0, 1) for the naive refinement, got {lambda}"
        )));
    }
    let refined = evaluate(
        pi,
        reference,
        batch,
        Objective::Sigmoid,
        beta,
        Some(Refinement {
            lambda,
            source: RefinementSource::Naive,
            detach: false,
        }),
    )?;
    let rescaled = dpo_loss(pi, reference, batch, beta * (1.0 - lambda))?;
    Ok((refined, rescaled))
}
