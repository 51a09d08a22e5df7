//! Tabular softmax policies.
//!
//! A [`PolicyTable`] holds one row of logits per context. Rows `0..num_queries`
//! are the base queries; `aug_map[q]` names the row of the prompt-augmented
//! counterpart of query `q`. A table without augmentation has an empty
//! `aug_map` and every row is a base query.
//!
//! The per-context normalizer of the implicit reward is never materialized:
//! every quantity built on top of these tables is a difference of log-ratios,
//! in which it cancels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a response in the shared response vocabulary.
pub type ResponseId = usize;

/// A base query, or the prompt-augmented version of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextId {
    pub index: usize,
    pub augmented: bool,
}

impl ContextId {
    pub const fn base(index: usize) -> Self {
        Self {
            index,
            augmented: false,
        }
    }

    /// The augmented counterpart of this query.
    pub const fn aug(self) -> Self {
        Self {
            index: self.index,
            augmented: true,
        }
    }
}

/// Logit matrix over (context, response) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    num_contexts: usize,
    num_responses: usize,
    aug_map: Vec<usize>,
    logits: Vec<f64>,
    trainable: bool,
}

/// On-disk form of a [`PolicyTable`].
#[derive(Debug, Serialize, Deserialize)]
struct PolicyDocument {
    num_contexts: usize,
    num_responses: usize,
    aug_map: Vec<usize>,
    logits: Vec<Vec<f64>>,
}

impl PolicyTable {
    /// All-zero logits (uniform rows). With `augmented`, the table has
    /// `2 * num_queries` rows and query `q` maps to row `num_queries + q`.
    pub fn uniform(num_queries: usize, num_responses: usize, augmented: bool) -> Result<Self> {
        let aug_map = if augmented {
            (num_queries..2 * num_queries).collect()
        } else {
            Vec::new()
        };
        let num_contexts = if augmented { 2 * num_queries } else { num_queries };
        Self::from_parts(
            num_contexts,
            num_responses,
            aug_map,
            vec![0.0; num_contexts * num_responses],
        )
    }

    /// Builds a table from row-major logits, validating the layout.
    pub fn from_parts(
        num_contexts: usize,
        num_responses: usize,
        aug_map: Vec<usize>,
        logits: Vec<f64>,
    ) -> Result<Self> {
        if num_contexts == 0 || num_responses == 0 {
            return Err(Error::Config(format!(
                "policy table needs at least one context and one response, got {num_contexts}x{num_responses}"
            )));
        }
        if logits.len() != num_contexts * num_responses {
            return Err(Error::Config(format!(
                "expected {} logits for a {num_contexts}x{num_responses} table, got {}",
                num_contexts * num_responses,
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "logit at flat index {bad} is not finite"
            )));
        }
        if !aug_map.is_empty() {
            let num_queries = aug_map.len();
            let mut seen = vec![false; num_contexts];
            for (q, &row) in aug_map.iter().enumerate() {
                if row < num_queries || row >= num_contexts {
                    return Err(Error::Config(format!(
                        "aug_map[{q}] = {row} must name a non-base row in {num_queries}..{num_contexts}"
                    )));
                }
                if std::mem::replace(&mut seen[row], true) {
                    return Err(Error::Config(format!(
                        "aug_map is not injective: row {row} used twice"
                    )));
                }
            }
        }
        Ok(Self {
            num_contexts,
            num_responses,
            aug_map,
            logits,
            trainable: false,
        })
    }

    pub fn from_rows(aug_map: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_contexts = rows.len();
        let num_responses = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != num_responses) {
            return Err(Error::Config(format!(
                "logit row {r} has {} entries, expected {num_responses}",
                rows[r].len()
            )));
        }
        Self::from_parts(
            num_contexts,
            num_responses,
            aug_map,
            rows.into_iter().flatten().collect(),
        )
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    /// Number of base queries.
    pub fn num_queries(&self) -> usize {
        if self.aug_map.is_empty() {
            self.num_contexts
        } else {
            self.aug_map.len()
        }
    }

    pub fn has_augmentation(&self) -> bool {
        !self.aug_map.is_empty()
    }

    pub fn aug_map(&self) -> &[usize] {
        &self.aug_map
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Row-major logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let start = row * self.num_responses;
        &self.logits[start..start + self.num_responses]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let start = row * self.num_responses;
        &mut self.logits[start..start + self.num_responses]
    }

    /// Resolves a context to its row index.
    pub fn row_of(&self, context: ContextId) -> Result<usize> {
        let num_queries = self.num_queries();
        if context.index >= num_queries {
            return Err(Error::Index {
                dimension: "query",
                index: context.index,
                size: num_queries,
            });
        }
        if context.augmented {
            self.aug_map.get(context.index).copied().ok_or_else(|| {
                Error::Config(format!(
                    "query {} has no augmented context (table has no aug_map)",
                    context.index
                ))
            })
        } else {
            Ok(context.index)
        }
    }

    pub(crate) fn check_response(&self, y: ResponseId) -> Result<()> {
        if y >= self.num_responses {
            return Err(Error::Index {
                dimension: "response",
                index: y,
                size: self.num_responses,
            });
        }
        Ok(())
    }

    /// `log pi(y | c)`.
    pub fn log_prob(&self, context: ContextId, y: ResponseId) -> Result<f64> {
        let row = self.row_of(context)?;
        self.check_response(y)?;
        let logits = self.row(row);
        Ok(logits[y] - log_sum_exp(logits))
    }

    /// Log-probabilities of a whole row.
    pub fn log_probs(&self, row: usize) -> Vec<f64> {
        log_softmax(self.row(row))
    }

    /// Probabilities of a whole row.
    pub fn probs(&self, row: usize) -> Vec<f64> {
        softmax(self.row(row))
    }

    /// Errors unless `other` has the same dimensions and augmentation layout.
    pub fn check_same_shape(&self, other: &PolicyTable) -> Result<()> {
        if self.num_contexts != other.num_contexts
            || self.num_responses != other.num_responses
            || self.aug_map != other.aug_map
        {
            return Err(Error::Config(format!(
                "policy shapes differ: {}x{} (aug {:?}) vs {}x{} (aug {:?})",
                self.num_contexts,
                self.num_responses,
                self.aug_map,
                other.num_contexts,
                other.num_responses,
                other.aug_map
            )));
        }
        Ok(())
    }

    /// A copy of `self` whose augmented rows are taken from `source`.
    ///
    /// Used to seed a trainable policy whose base rows start at the reference
    /// while its prompt-augmented rows already carry prompted knowledge.
    pub fn with_augmented_rows_from(&self, source: &PolicyTable) -> Result<PolicyTable> {
        self.check_same_shape(source)?;
        let mut out = self.clone();
        for &row in &self.aug_map {
            out.row_mut(row).copy_from_slice(source.row(row));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyDocument {
            num_contexts: self.num_contexts,
            num_responses: self.num_responses,
            aug_map: self.aug_map.clone(),
            logits: self
                .logits
                .chunks(self.num_responses)
                .map(<[f64]>::to_vec)
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        if doc.logits.len() != doc.num_contexts {
            return Err(Error::Config(format!(
                "num_contexts = {} but {} logit rows given",
                doc.num_contexts,
                doc.logits.len()
            )));
        }
        let table = Self::from_rows(doc.aug_map, doc.logits)?;
        if table.num_responses != doc.num_responses {
            return Err(Error::Config(format!(
                "num_responses = {} but rows have {} entries",
                doc.num_responses, table.num_responses
            )));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `log pi(y|c) - log pi_ref(y|c)`.
pub fn log_ratio(
    pi: &PolicyTable,
    reference: &PolicyTable,
    context: ContextId,
    y: ResponseId,
) -> Result<f64> {
    Ok(pi.log_prob(context, y)? - reference.log_prob(context, y)?)
}

/// Implicit reward difference `r(y_pos|c) - r(y_neg|c)` of `pi` against `reference`.
pub fn implicit_reward_diff(
    pi: &PolicyTable,
    reference: &PolicyTable,
    context: ContextId,
    y_pos: ResponseId,
    y_neg: ResponseId,
    beta: f64,
) -> Result<f64> {
    pi.check_same_shape(reference)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!("beta must be positive, got {beta}")));
    }
    let row = pi.row_of(context)?;
    pi.check_response(y_pos)?;
    pi.check_response(y_neg)?;
    // Normalizers of both rows cancel in the difference.
    let pi_row = pi.row(row);
    let ref_row = reference.row(row);
    Ok(beta * ((pi_row[y_pos] - pi_row[y_neg]) - (ref_row[y_pos] - ref_row[y_neg])))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| v - lse).collect()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
