//! Ground-truth rewards and the Bradley-Terry preference model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ResponseId;

/// The oracle reward table `r*(y|x)`, one row per base query.
///
/// `prompt_gain` sets how strongly the prompt-augmented context of the
/// constructed policies reflects `r*`. Training code never reads this table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rewards: Vec<Vec<f64>>,
    pub prompt_gain: f64,
}

impl GroundTruth {
    pub fn new(rewards: Vec<Vec<f64>>, prompt_gain: f64) -> Result<Self> {
        let gt = Self {
            rewards,
            prompt_gain,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_responses();
        if self.rewards.is_empty() || n == 0 {
            return Err(Error::Config("ground truth has no rewards".into()));
        }
        for (q, row) in self.rewards.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!(
                    "reward row {q} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(y) = row.iter().position(|r| !r.is_finite()) {
                return Err(Error::Config(format!("r*({y}|{q}) is not finite")));
            }
        }
        if !(self.prompt_gain >= 0.0 && self.prompt_gain.is_finite()) {
            return Err(Error::Config(format!(
                "prompt_gain must be a finite non-negative number, got {}",
                self.prompt_gain
            )));
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_responses(&self) -> usize {
        self.rewards.first().map_or(0, Vec::len)
    }

    pub fn reward(&self, query: usize, y: ResponseId) -> f64 {
        self.rewards[query][y]
    }

    /// Best response for a query; the lowest index wins ties.
    pub fn best_response(&self, query: usize) -> ResponseId {
        let row = &self.rewards[query];
        let mut best = 0;
        for (y, &r) in row.iter().enumerate() {
            if r > row[best] {
                best = y;
            }
        }
        best
    }

    /// True when two responses of `query` share the same reward.
    pub fn has_ties(&self, query: usize) -> bool {
        let mut row = self.rewards[query].clone();
        row.sort_by(f64::total_cmp);
        row.windows(2).any(|w| w[0] == w[1])
    }

    /// Reward quantized onto the integer judge scale `0..=5`, using the
    /// global reward range of the table.
    pub fn judge_score(&self, query: usize, y: ResponseId) -> f64 {
        let (lo, hi) = self.reward_range();
        if hi <= lo {
            return 0.0;
        }
        (5.0 * (self.rewards[query][y] - lo) / (hi - lo)).round()
    }

    fn reward_range(&self) -> (f64, f64) {
        self.rewards
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_str(text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Logistic function, branch-stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(x)` without overflow or cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability that the response with reward `r_pos` is preferred.
pub fn bt_probability(r_pos: f64, r_neg: f64) -> Result<f64> {
    if !r_pos.is_finite() || !r_neg.is_finite() {
        return Err(Error::Domain(format!(
            "rewards must be finite, got ({r_pos}, {r_neg})"
        )));
    }
    Ok(sigmoid(r_pos - r_neg))
}

/// Mean Bradley-Terry log-likelihood of a batch of `(r_pos, r_neg)` pairs.
pub fn bt_log_likelihood(batch: &[(f64, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut total = 0.0;
    for &(r_pos, r_neg) in batch {
        if !r_pos.is_finite() || !r_neg.is_finite() {
            return Err(Error::Domain(format!(
                "rewards must be finite, got ({r_pos}, {r_neg})"
            )));
        }
        total += log_sigmoid(r_pos - r_neg);
    }
    Ok(total / batch.len() as f64)
}
