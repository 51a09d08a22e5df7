//! Registered property checks run by `prefopt verify`.
//!
//! Each check draws fresh random instances from the given seed and reports
//! its worst observed value against a fixed threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{prompted_initialization, make_assumption_satisfying_policies, generate, Dataset, PreferenceTuple, RewardDistribution, ScenarioSpec};
use crate::error::{Error, Result};
use crate::loss::{evaluate, method_loss, sr_dpo_naive_degeneracy, Method, Objective, Refinement, RefinementSource};
use crate::optim::{train, NoObserver, TrainConfig};
use crate::policy::{ContextId, PolicyTable};
use crate::refine::{check_monotone_equivalence_with, delta_refine, telescoping_residual, Violation};
use crate::reward::GroundTruth;

/// Deliberate defects used to show that the checks are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negate every prompt refinement seen by the refinement checks.
    FlipDeltaSign,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip-delta-sign" => Ok(Fault::FlipDeltaSign),
            _ => Err(Error::Argument(format!("unknown fault {s:?} (known: flip-delta-sign)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value (residual, error, or count of failures).
    pub observed: f64,
    pub threshold: f64,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

type CheckFn = fn(&VerifyOptions) -> Result<CheckResult>;

const REGISTRY: &[(&str, CheckFn)] = &[
    ("telescoping", check_telescoping),
    ("monotone-equivalence", check_monotone),
    ("naive-degeneracy", check_naive_degeneracy),
    ("stop-gradient", check_stop_gradient),
    ("gradient-finite-difference", check_gradients),
    ("sr-ipo-fixed-point", check_sr_ipo_fixed_point),
    ("lambda-zero-reduction", check_lambda_zero),
];

/// Names of all registered checks, in execution order.
pub fn check_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(name, _)| *name).collect()
}

pub fn run_check(name: &str, options: &VerifyOptions) -> Result<CheckResult> {
    let (_, f) = REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Argument(format!("unknown check {name:?}")))?;
    f(options)
}

pub fn run_all(options: &VerifyOptions) -> Result<VerifyReport> {
    let checks = REGISTRY
        .iter()
        .map(|(_, f)| f(options))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        seed: options.seed,
        fault: options.fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn result(name: &str, observed: f64, threshold: f64, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        observed,
        threshold,
        detail,
        violations: Vec::new(),
    }
}

fn rng_for(options: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    rng.set_stream(salt);
    rng
}

/// Random augmented policy pair and a batch of distinct-response tuples.
pub fn random_instance(
    rng: &mut impl Rng,
    num_queries: usize,
    num_responses: usize,
    batch_size: usize,
) -> Result<(PolicyTable, PolicyTable, Vec<PreferenceTuple>)> {
    let draw = |rng: &mut dyn rand::RngCore| -> Result<PolicyTable> {
        let rows = (0..2 * num_queries)
            .map(|_| (0..num_responses).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        PolicyTable::from_rows((num_queries..2 * num_queries).collect(), rows)
    };
    let pi = draw(rng)?;
    let reference = draw(rng)?;
    let batch = (0..batch_size)
        .map(|_| {
            let a = rng.random_range(0..num_responses);
            let b = (a + rng.random_range(1..num_responses)) % num_responses;
            PreferenceTuple {
                query: rng.random_range(0..num_queries),
                y_pos: a,
                y_neg: b,
                true_gap: None,
                judge_scores: None,
            }
        })
        .collect();
    Ok((pi, reference, batch))
}

fn sign(options: &VerifyOptions) -> f64 {
    match options.fault {
        Some(Fault::FlipDeltaSign) => -1.0,
        None => 1.0,
    }
}

fn check_telescoping(options: &VerifyOptions) -> Result<CheckResult> {
    const THRESHOLD: f64 = 1e-10;
    let mut rng = rng_for(options, 1);
    let s = sign(options);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (pi, reference, _) = random_instance(&mut rng, 3, 6, 0)?;
        let x = ContextId::base(rng.random_range(0..3));
        let (y_pos, y_neg, y_star) = (rng.random_range(0..6), rng.random_range(0..6), rng.random_range(0..6));
        let delta = |a, b| {
            s * delta_refine(&pi, &reference, x, a, b, 0.1)
                .map(|v| v.delta)
                .unwrap_or(f64::NAN)
        };
        worst = worst.max(telescoping_residual(delta, y_pos, y_neg, y_star));
    }
    Ok(result(
        "telescoping",
        worst,
        THRESHOLD,
        worst <= THRESHOLD,
        "max anchor-decomposition residual over 1000 random instances".into(),
    ))
}

fn check_monotone(options: &VerifyOptions) -> Result<CheckResult> {
    let spec = ScenarioSpec {
        num_queries: 20,
        num_responses: 8,
        reward_distribution: RewardDistribution::Gaussian { mu: 0.0, sigma: 1.0 },
        tuples_per_query: 1,
        seed: options.seed,
        ..ScenarioSpec::default()
    };
    let (gt, _) = generate(&spec)?;
    let beta = 0.1;
    let (pi, reference) = make_assumption_satisfying_policies(&gt, beta, gt.prompt_gain)?;
    let s = sign(options);
    let mut violations = Vec::new();
    let (mut pairs, mut pair_pairs) = (0, 0);
    for q in 0..gt.num_queries() {
        let x = ContextId::base(q);
        let report = check_monotone_equivalence_with(&gt, q, gt.num_responses(), |a, b| {
            s * delta_refine(&pi, &reference, x, a, b, beta)
                .map(|v| v.delta)
                .unwrap_or(f64::NAN)
        })?;
        pairs += report.pairs_checked;
        pair_pairs += report.pair_pairs_checked;
        violations.extend(report.violations);
    }
    let mut r = result(
        "monotone-equivalence",
        violations.len() as f64,
        0.0,
        violations.is_empty(),
        format!("{pairs} ordered pairs and {pair_pairs} pair-of-pairs over 20 queries"),
    );
    r.violations = violations;
    Ok(r)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_naive_degeneracy(options: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng_for(options, 3);
    let (mut worst_value, mut worst_grad) = (0.0f64, 0.0f64);
    for &lambda in &[0.1, 0.3, 0.5] {
        for _ in 0..100 {
            let (pi, reference, batch) = random_instance(&mut rng, 3, 5, 8)?;
            let (a, b) = sr_dpo_naive_degeneracy(&pi, &reference, &batch, 0.1, lambda)?;
            worst_value = worst_value.max((a.loss - b.loss).abs());
            worst_grad = worst_grad.max(max_abs_diff(&a.gradient, &b.gradient));
        }
    }
    let passed = worst_value <= 1e-12 && worst_grad <= 1e-10;
    Ok(result(
        "naive-degeneracy",
        worst_value.max(worst_grad),
        1e-12,
        passed,
        format!("value gap {worst_value:.3e} (<= 1e-12), gradient gap {worst_grad:.3e} (<= 1e-10)"),
    ))
}

fn check_stop_gradient(options: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng_for(options, 4);
    let mut worst = 0.0f64;
    let mut live = 0;
    let trials = 100;
    for _ in 0..trials {
        let (pi, reference, batch) = random_instance(&mut rng, 3, 5, 8)?;
        let mut all_live = true;
        for objective in [Objective::Sigmoid, Objective::Squared] {
            let refined = |detach| {
                evaluate(&pi, &reference, &batch, objective, 0.1, Some(Refinement {
                    lambda: 0.5,
                    source: RefinementSource::Prompt,
                    detach,
                }))
            };
            let detached = refined(true)?;
            let injected = evaluate(&pi, &reference, &batch, objective, 0.1, Some(Refinement {
                lambda: 0.5,
                source: RefinementSource::Fixed(&detached.per_tuple_delta),
                detach: true,
            }))?;
            worst = worst.max(max_abs_diff(&detached.gradient, &injected.gradient));
            let attached = refined(false)?;
            let diff: Vec<f64> = attached.gradient.iter().zip(&detached.gradient).map(|(a, b)| a - b).collect();
            all_live &= norm(&diff) > 1e-3 * norm(&detached.gradient);
        }
        live += usize::from(all_live);
    }
    let passed = worst <= 1e-12 && live >= 95;
    Ok(result(
        "stop-gradient",
        worst,
        1e-12,
        passed,
        format!("constant-injection gap {worst:.3e}; attached gradient differs on {live}/{trials} instances (need 95)"),
    ))
}

/// Central-difference gradient of `f` at `logits`.
pub fn finite_difference(logits: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = logits.to_vec();
    let mut out = Vec::with_capacity(logits.len());
    for k in 0..logits.len() {
        probe[k] = logits[k] + h;
        let up = f(&probe)?;
        probe[k] = logits[k] - h;
        let down = f(&probe)?;
        probe[k] = logits[k];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        return 0.0;
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / scale
}

fn check_gradients(options: &VerifyOptions) -> Result<CheckResult> {
    const THRESHOLD: f64 = 1e-5;
    let mut rng = rng_for(options, 5);
    let mut worst = 0.0f64;
    let mut worst_method = Method::Dpo;
    for method in Method::ALL {
        for _ in 0..100 {
            let (pi, reference, batch) = random_instance(&mut rng, 2, 4, 5)?;
            let lambda = if method.is_refined() { 0.5 } else { 0.0 };
            let analytic = method_loss(method, &pi, &reference, &batch, 0.1, lambda)?;
            let objective = match method.base() {
                Method::Dpo => Objective::Sigmoid,
                _ => Objective::Squared,
            };
            // Detached refinement: perturb only through the margin path.
            let fixed = analytic.per_tuple_delta.clone();
            let numeric = finite_difference(pi.logits(), 1e-5, |logits| {
                let probe = PolicyTable::from_parts(pi.num_contexts(), pi.num_responses(), pi.aug_map().to_vec(), logits.to_vec())?;
                let refinement = method.is_refined().then(|| Refinement {
                    lambda,
                    source: RefinementSource::Fixed(&fixed),
                    detach: true,
                });
                Ok(evaluate(&probe, &reference, &batch, objective, 0.1, refinement)?.loss)
            })?;
            let err = relative_error(&analytic.gradient, &numeric);
            if err > worst {
                worst = err;
                worst_method = method;
            }
        }
    }
    Ok(result(
        "gradient-finite-difference",
        worst,
        THRESHOLD,
        worst <= THRESHOLD,
        format!("max relative error over 4 methods x 100 instances (worst: {worst_method})"),
    ))
}

/// Single-query, four-response chain instance used by the fixed-point check.
pub fn fixed_point_instance(seed: u64) -> Result<(GroundTruth, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rewards: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
    rewards.sort_by(f64::total_cmp);
    rewards.dedup();
    if rewards.len() < 4 {
        return Err(Error::Argument("tied rewards in fixed-point instance".into()));
    }
    let gt = GroundTruth::new(vec![rewards.clone()], 1.0)?;
    // A chain 3 > 2 > 1 > 0: consistent targets exist for every tuple.
    let tuples = (0..3)
        .map(|i| PreferenceTuple {
            query: 0,
            y_pos: i + 1,
            y_neg: i,
            true_gap: Some(rewards[i + 1] - rewards[i]),
            judge_scores: None,
        })
        .collect();
    Ok((gt, Dataset::new(1, 4, tuples)?))
}

/// Largest `|m - 1/(2 beta) - lambda * Delta|` over a dataset.
pub fn fixed_point_gap(pi: &PolicyTable, reference: &PolicyTable, dataset: &Dataset, beta: f64, lambda: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for t in &dataset.tuples {
        let x = ContextId::base(t.query);
        let m = crate::policy::implicit_reward_diff(pi, reference, x, t.y_pos, t.y_neg, 1.0)?;
        let delta = delta_refine(pi, reference, x, t.y_pos, t.y_neg, beta)?.delta;
        worst = worst.max((m - 1.0 / (2.0 * beta) - lambda * delta).abs());
    }
    Ok(worst)
}

/// Training config used by the fixed-point check. With the default epsilon
/// RMSprop settles into a sign-like cycle of amplitude `learning_rate`; a
/// larger epsilon turns the final approach into plain gradient descent.
pub fn fixed_point_config(seed: u64) -> TrainConfig {
    TrainConfig {
        method: Method::SrIpo,
        lambda: 0.5,
        learning_rate: 1e-2,
        batch_size: 3,
        steps: 5000,
        seed,
        rmsprop_epsilon: 0.1,
        ..TrainConfig::default()
    }
}

fn check_sr_ipo_fixed_point(options: &VerifyOptions) -> Result<CheckResult> {
    let (gt, dataset) = fixed_point_instance(options.seed)?;
    let config = fixed_point_config(options.seed);
    let (init, reference) = prompted_initialization(&gt, config.beta, gt.prompt_gain)?;
    let state = train(&config, &dataset, &reference, Some(&init), config.steps, &mut NoObserver)?;
    let residual = method_loss(config.method, &state.policy, &reference, &dataset.tuples, config.beta, config.lambda)?.loss;
    let gap = fixed_point_gap(&state.policy, &reference, &dataset, config.beta, config.lambda)?;
    Ok(result(
        "sr-ipo-fixed-point",
        residual,
        1e-4,
        residual < 1e-4 && gap < 1e-3,
        format!("squared residual {residual:.3e} (< 1e-4), max |LHS - RHS| {gap:.3e} (< 1e-3)"),
    ))
}

fn check_lambda_zero(options: &VerifyOptions) -> Result<CheckResult> {
    let spec = ScenarioSpec {
        seed: options.seed,
        ..ScenarioSpec::default()
    };
    let (gt, dataset) = generate(&spec)?;
    let mut worst = 0.0f64;
    for (refined, base) in [(Method::SrDpo, Method::Dpo), (Method::SrIpo, Method::Ipo)] {
        let base_cfg = TrainConfig {
            method: base,
            steps: 200,
            seed: options.seed,
            ..TrainConfig::default()
        };
        let refined_cfg = TrainConfig {
            method: refined,
            ..base_cfg.clone()
        };
        let (init, reference) = prompted_initialization(&gt, base_cfg.beta, gt.prompt_gain)?;
        let collect = |cfg: &TrainConfig| -> Result<Vec<f64>> {
            let mut values = Vec::new();
            let mut observer = |cp: &crate::optim::Checkpoint, _: &crate::optim::TrainState| {
                let m = &cp.metrics;
                values.extend([cp.loss, m.avg_marginal, m.accuracy, m.aug_accuracy.unwrap_or(f64::NAN)]);
                values.extend([m.pearson, m.spearman, m.kendall_tau].map(|v| v.unwrap_or(f64::NAN)));
                Ok(())
            };
            train(cfg, &dataset, &reference, Some(&init), 50, &mut observer)?;
            Ok(values)
        };
        let a = collect(&base_cfg)?;
        let b = collect(&refined_cfg)?;
        if a.len() != b.len() {
            worst = f64::INFINITY;
            continue;
        }
        for (x, y) in a.iter().zip(&b) {
            let d = if x.is_nan() && y.is_nan() { 0.0 } else { (x - y).abs() };
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    Ok(result(
        "lambda-zero-reduction",
        worst,
        1e-12,
        worst <= 1e-12,
        "max metric difference between refined runs at lambda = 0 and their base methods".into(),
    ))
}
