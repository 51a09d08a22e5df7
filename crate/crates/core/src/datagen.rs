//! Synthetic preference data with a known reward oracle.
//!
//! [`generate`] draws a ground-truth reward table and labels response pairs
//! with it, either deterministically or through Bradley-Terry sampling.
//! [`make_assumption_satisfying_policies`] builds policy pairs whose
//! prompt-augmented contexts rank responses exactly like the oracle.
//!
//! Datasets are stored as JSONL: a header line with the dimensions, then one
//! tuple per line.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyTable, ResponseId};
use crate::reward::{sigmoid, GroundTruth};

/// Cap on redraws when rejecting tied rewards or tied pairs.
const MAX_REDRAWS: usize = 1000;

/// One preference `(x, y+, y-)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    /// Base query index.
    pub query: usize,
    pub y_pos: ResponseId,
    pub y_neg: ResponseId,
    /// `r*(y+|x) - r*(y-|x)` for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_gap: Option<f64>,
    /// Judge scores `(s+, s-)` on the 0-5 scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_scores: Option<(f64, f64)>,
}

impl PreferenceTuple {
    /// External quality difference of the tuple: the true gap when known,
    /// otherwise the judge score difference.
    pub fn quality_gap(&self) -> Option<f64> {
        self.true_gap
            .or_else(|| self.judge_scores.map(|(pos, neg)| pos - neg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    num_queries: usize,
    num_responses: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_queries: usize,
    pub num_responses: usize,
    pub tuples: Vec<PreferenceTuple>,
}

impl Dataset {
    pub fn new(num_queries: usize, num_responses: usize, tuples: Vec<PreferenceTuple>) -> Result<Self> {
        let ds = Self {
            num_queries,
            num_responses,
            tuples,
        };
        for (i, t) in ds.tuples.iter().enumerate() {
            ds.validate_tuple(t, i + 1)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Tuples `range` as a dataset of the same dimensions.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            num_queries: self.num_queries,
            num_responses: self.num_responses,
            tuples: self.tuples[range].to_vec(),
        }
    }

    fn validate_tuple(&self, t: &PreferenceTuple, line: usize) -> Result<()> {
        let fail = |message: String| Err(Error::Validation { line, message });
        if t.query >= self.num_queries {
            return fail(format!("query {} out of range (num_queries {})", t.query, self.num_queries));
        }
        for (name, y) in [("y_pos", t.y_pos), ("y_neg", t.y_neg)] {
            if y >= self.num_responses {
                return fail(format!("{name} {y} out of range (num_responses {})", self.num_responses));
            }
        }
        if t.y_pos == t.y_neg {
            return fail(format!("y_pos and y_neg are both {}", t.y_pos));
        }
        if let Some(g) = t.true_gap {
            if !g.is_finite() {
                return fail(format!("true_gap {g} is not finite"));
            }
        }
        if let Some((a, b)) = t.judge_scores {
            if !a.is_finite() || !b.is_finite() {
                return fail("judge_scores must be finite".into());
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            num_queries: self.num_queries,
            num_responses: self.num_responses,
        })?;
        out.push('\n');
        for t in &self.tuples {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Parses the JSONL format from any reader. Line numbers are 1-based and
    /// count the header.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut header: Option<Header> = None;
        let mut ds = Dataset {
            num_queries: 0,
            num_responses: 0,
            tuples: Vec::new(),
        };
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match header {
                None => {
                    let h: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: lineno,
                        message: format!("expected header {{\"num_queries\", \"num_responses\"}}: {e}"),
                    })?;
                    ds.num_queries = h.num_queries;
                    ds.num_responses = h.num_responses;
                    header = Some(h);
                }
                Some(_) => {
                    let t: PreferenceTuple = serde_json::from_str(&line).map_err(|e| Error::Parse {
                        line: lineno,
                        message: e.to_string(),
                    })?;
                    ds.validate_tuple(&t, lineno)?;
                    ds.tuples.push(t);
                }
            }
        }
        if ds.tuples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ds)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        Self::read_jsonl(text.as_bytes())
    }
}

/// Loads and validates a JSONL dataset file.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_jsonl(BufReader::new(file))
}

/// How ground-truth rewards (and, for `TwoCluster`, pair gaps) are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardDistribution {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mu: f64, sigma: f64 },
    /// Half the responses of each query sit in `[0, gap_small]`, the other
    /// half in `[gap_large, gap_large + gap_small]`. A fraction `mix` of the
    /// tuples pairs responses across the halves (large gap), the rest pairs
    /// within one half (small gap).
    TwoCluster { gap_small: f64, gap_large: f64, mix: f64 },
}

impl fmt::Display for RewardDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RewardDistribution::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            RewardDistribution::Gaussian { mu, sigma } => write!(f, "gaussian:{mu},{sigma}"),
            RewardDistribution::TwoCluster { gap_small, gap_large, mix } => {
                write!(f, "two_cluster:{gap_small},{gap_large},{mix}")
            }
        }
    }
}

impl FromStr for RewardDistribution {
    type Err = Error;

    /// `uniform:LO,HI`, `gaussian:MU,SIGMA` or `two_cluster:SMALL,LARGE,MIX`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = args
            .split(',')
            .filter(|a| !a.trim().is_empty())
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Argument(format!("bad distribution parameters {args:?}: {e}")))?;
        match (kind, nums.as_slice()) {
            ("uniform", &[lo, hi]) => Ok(RewardDistribution::Uniform { lo, hi }),
            ("gaussian", &[mu, sigma]) => Ok(RewardDistribution::Gaussian { mu, sigma }),
            ("two_cluster", &[gap_small, gap_large, mix]) => Ok(RewardDistribution::TwoCluster {
                gap_small,
                gap_large,
                mix,
            }),
            _ => Err(Error::Argument(format!(
                "cannot parse distribution {s:?}; expected uniform:LO,HI, gaussian:MU,SIGMA or two_cluster:SMALL,LARGE,MIX"
            ))),
        }
    }
}

fn default_prompt_gain() -> f64 {
    1.0
}

/// Parameters of a synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub num_queries: usize,
    pub num_responses: usize,
    pub reward_distribution: RewardDistribution,
    /// 0 labels every pair by `r*`; any positive value samples labels from
    /// the Bradley-Terry model instead.
    pub label_noise: f64,
    pub tuples_per_query: usize,
    pub seed: u64,
    #[serde(default = "default_prompt_gain")]
    pub prompt_gain: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            num_queries: 10,
            num_responses: 8,
            reward_distribution: RewardDistribution::Uniform { lo: 0.0, hi: 1.0 },
            label_noise: 0.0,
            tuples_per_query: 6,
            seed: 0,
            prompt_gain: default_prompt_gain(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.num_queries == 0 {
            return bad("num_queries must be positive".into());
        }
        if self.num_responses < 2 {
            return bad(format!("num_responses must be at least 2, got {}", self.num_responses));
        }
        if self.tuples_per_query == 0 {
            return bad("tuples_per_query must be positive".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 0.5), got {}", self.label_noise));
        }
        if !(self.prompt_gain >= 0.0 && self.prompt_gain.is_finite()) {
            return bad(format!("prompt_gain must be non-negative, got {}", self.prompt_gain));
        }
        match self.reward_distribution {
            RewardDistribution::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return bad(format!("uniform bounds must satisfy lo <= hi, got {lo}, {hi}"));
                }
                if lo == hi && self.label_noise == 0.0 {
                    return bad("constant rewards cannot be labelled without label noise".into());
                }
            }
            RewardDistribution::Gaussian { mu, sigma } => {
                if !(mu.is_finite() && sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("gaussian needs finite mu and sigma > 0, got {mu}, {sigma}"));
                }
            }
            RewardDistribution::TwoCluster { gap_small, gap_large, mix } => {
                if !(gap_small > 0.0 && gap_small < gap_large && gap_large.is_finite()) {
                    return bad(format!(
                        "two_cluster needs 0 < gap_small < gap_large, got {gap_small}, {gap_large}"
                    ));
                }
                if !(mix > 0.0 && mix < 1.0) {
                    return bad(format!("two_cluster mix must lie in (0, 1), got {mix}"));
                }
                if self.num_responses < 4 {
                    return bad("two_cluster needs at least 4 responses (two per cluster)".into());
                }
            }
        }
        Ok(())
    }

    fn deterministic(&self) -> bool {
        self.label_noise == 0.0
    }
}

/// Draws a ground truth and a labelled dataset.
pub fn generate(spec: &ScenarioSpec) -> Result<(GroundTruth, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_responses;

    let mut rewards = Vec::with_capacity(spec.num_queries);
    let mut clusters = Vec::with_capacity(spec.num_queries);
    for _ in 0..spec.num_queries {
        let mut attempts = 0;
        let (row, groups) = loop {
            let drawn = draw_rewards(spec, &mut rng)?;
            if !spec.deterministic() || !has_ties(&drawn.0) {
                break drawn;
            }
            attempts += 1;
            if attempts >= MAX_REDRAWS {
                return Err(Error::Argument(
                    "reward distribution keeps producing tied rewards".into(),
                ));
            }
        };
        rewards.push(row);
        clusters.push(groups);
    }
    let gt = GroundTruth::new(rewards, spec.prompt_gain)?;

    let mut tuples = Vec::with_capacity(spec.num_queries * spec.tuples_per_query);
    for q in 0..spec.num_queries {
        let r = &gt.rewards[q];
        for _ in 0..spec.tuples_per_query {
            let mut attempts = 0;
            let (a, b) = loop {
                let (a, b) = draw_pair(spec, &clusters[q], n, &mut rng);
                if !spec.deterministic() || r[a] != r[b] {
                    break (a, b);
                }
                attempts += 1;
                if attempts >= MAX_REDRAWS {
                    return Err(Error::Argument(format!("query {q} has no untied response pair")));
                }
            };
            let a_wins = if spec.deterministic() {
                r[a] > r[b]
            } else {
                rng.random::<f64>() < sigmoid(r[a] - r[b])
            };
            let (y_pos, y_neg) = if a_wins { (a, b) } else { (b, a) };
            tuples.push(PreferenceTuple {
                query: q,
                y_pos,
                y_neg,
                true_gap: Some(r[y_pos] - r[y_neg]),
                judge_scores: Some((gt.judge_score(q, y_pos), gt.judge_score(q, y_neg))),
            });
        }
    }
    // Interleave queries so any leading slice covers many of them.
    tuples.shuffle(&mut rng);
    let dataset = Dataset::new(spec.num_queries, n, tuples)?;
    Ok((gt, dataset))
}

/// Rewards of one query, plus the low/high response groups for `TwoCluster`.
fn draw_rewards(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Option<[Vec<usize>; 2]>)> {
    let n = spec.num_responses;
    match spec.reward_distribution {
        RewardDistribution::Uniform { lo, hi } => Ok((
            (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
            None,
        )),
        RewardDistribution::Gaussian { mu, sigma } => {
            let normal = Normal::new(mu, sigma).map_err(|e| Error::Argument(e.to_string()))?;
            Ok(((0..n).map(|_| normal.sample(rng)).collect(), None))
        }
        RewardDistribution::TwoCluster { gap_small, gap_large, .. } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let high = order.split_off(n / 2);
            let low = order;
            let mut row = vec![0.0; n];
            for &y in &low {
                row[y] = gap_small * rng.random::<f64>();
            }
            for &y in &high {
                row[y] = gap_large + gap_small * rng.random::<f64>();
            }
            Ok((row, Some([low, high])))
        }
    }
}

fn draw_pair(
    spec: &ScenarioSpec,
    groups: &Option<[Vec<usize>; 2]>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    match (spec.reward_distribution, groups) {
        (RewardDistribution::TwoCluster { mix, .. }, Some([low, high])) => {
            if rng.random::<f64>() < mix {
                let a = low[rng.random_range(0..low.len())];
                let b = high[rng.random_range(0..high.len())];
                if rng.random::<bool>() {
                    (a, b)
                } else {
                    (b, a)
                }
            } else {
                let group = if rng.random::<bool>() { low } else { high };
                distinct_pair(group, rng)
            }
        }
        _ => {
            let all: Vec<usize> = (0..n).collect();
            distinct_pair(&all, rng)
        }
    }
}

fn distinct_pair(items: &[usize], rng: &mut ChaCha8Rng) -> (usize, usize) {
    let i = rng.random_range(0..items.len());
    let j = (i + rng.random_range(1..items.len())) % items.len();
    (items[i], items[j])
}

fn has_ties(row: &[f64]) -> bool {
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Builds `(pi, reference)` such that on every augmented context the
/// implicit reward of `pi` equals `prompt_gain * r*` up to a per-row
/// constant. The reference is uniform everywhere; base rows of `pi` carry a
/// half-strength copy of the same ordering.
pub fn make_assumption_satisfying_policies(
    gt: &GroundTruth,
    beta: f64,
    prompt_gain: f64,
) -> Result<(PolicyTable, PolicyTable)> {
    if !(prompt_gain > 0.0 && prompt_gain.is_finite()) {
        return Err(Error::Argument(format!("prompt_gain must be positive, got {prompt_gain}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!("beta must be positive, got {beta}")));
    }
    let reference = PolicyTable::uniform(gt.num_queries(), gt.num_responses(), true)?;
    let mut pi = reference.clone();
    let scale = prompt_gain / beta;
    for q in 0..gt.num_queries() {
        let aug_row = reference.aug_map()[q];
        for (y, &r) in gt.rewards[q].iter().enumerate() {
            pi.row_mut(aug_row)[y] = scale * r;
            pi.row_mut(q)[y] = 0.5 * scale * r;
        }
    }
    Ok((pi, reference))
}

/// Initial trainable policy and reference for refined training: the
/// reference is uniform, the initial policy matches it on base queries and
/// carries the assumption-satisfying construction on augmented contexts.
pub fn prompted_initialization(
    gt: &GroundTruth,
    beta: f64,
    prompt_gain: f64,
) -> Result<(PolicyTable, PolicyTable)> {
    let (pi, reference) = make_assumption_satisfying_policies(gt, beta, prompt_gain)?;
    let init = reference.with_augmented_rows_from(&pi)?;
    Ok((init, reference))
}
