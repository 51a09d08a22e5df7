//! Minibatch training with RMSprop and gradient-norm clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, PreferenceTuple};
use crate::error::{Error, Result};
use crate::loss::{method_loss, Method};
use crate::metrics::{evaluate_report, MetricsReport};
use crate::policy::PolicyTable;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub beta: f64,
    /// Refinement weight; must be 0 for `dpo` and `ipo`.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dpo,
            beta: 0.1,
            lambda: 0.0,
            learning_rate: 1e-2,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            grad_clip_norm: Some(1.0),
            rmsprop_decay: 0.99,
            rmsprop_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Refinement weights swept when selecting lambda.
    pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

    /// Settings used for billion-parameter language models (learning rate
    /// 5e-7, batch 64). Far too small a step for tabular logits; kept for
    /// reference runs.
    pub fn large_model_preset(method: Method) -> Self {
        Self {
            method,
            learning_rate: 5e-7,
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !self.method.is_refined() && self.lambda != 0.0 {
            return bad(format!("lambda must be 0 for {}, got {}", self.method, self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad(format!("rmsprop_decay must lie in (0, 1), got {}", self.rmsprop_decay));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return bad(format!("rmsprop_epsilon must be positive, got {}", self.rmsprop_epsilon));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// `accumulator <- decay * accumulator + (1 - decay) * g^2`,
/// `theta <- theta - lr * g / (sqrt(accumulator) + epsilon)`.
pub fn rmsprop_step(
    params: &mut [f64],
    accumulator: &mut [f64],
    gradient: &[f64],
    learning_rate: f64,
    decay: f64,
    epsilon: f64,
) {
    debug_assert_eq!(params.len(), gradient.len());
    debug_assert_eq!(accumulator.len(), gradient.len());
    for ((p, a), &g) in params.iter_mut().zip(accumulator.iter_mut()).zip(gradient) {
        *a = decay * *a + (1.0 - decay) * g * g;
        *p -= learning_rate * g / (a.sqrt() + epsilon);
    }
}

/// Rescales `gradient` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradient(gradient: &mut [f64], max_norm: f64) -> f64 {
    let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in gradient.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Shuffled passes over the dataset; a batch may straddle two epochs.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl EpochSampler {
    pub fn new(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            rng,
            order,
            cursor: 0,
            epoch: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
        }
        batch
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub policy: PolicyTable,
    pub rms_accumulator: Vec<f64>,
    pub sampler: EpochSampler,
}

/// Full-dataset evaluation emitted during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Method loss over the whole dataset.
    pub loss: f64,
    pub metrics: MetricsReport,
}

pub trait TrainObserver {
    fn on_checkpoint(&mut self, checkpoint: &Checkpoint, state: &TrainState) -> Result<()>;
}

impl<F> TrainObserver for F
where
    F: FnMut(&Checkpoint, &TrainState) -> Result<()>,
{
    fn on_checkpoint(&mut self, checkpoint: &Checkpoint, state: &TrainState) -> Result<()> {
        self(checkpoint, state)
    }
}

/// Observer that drops every checkpoint.
pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_checkpoint(&mut self, _: &Checkpoint, _: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Evaluates the method loss and metrics of `policy` on the whole dataset.
pub fn checkpoint(
    config: &TrainConfig,
    dataset: &Dataset,
    reference: &PolicyTable,
    policy: &PolicyTable,
    step: usize,
) -> Result<Checkpoint> {
    let loss = method_loss(config.method, policy, reference, &dataset.tuples, config.beta, config.lambda)?.loss;
    Ok(Checkpoint {
        step,
        loss,
        metrics: evaluate_report(policy, reference, dataset)?,
    })
}

/// Runs `config.steps` optimizer steps starting from `init` (or a copy of
/// `reference`). The observer sees step 0, every `eval_interval`-th step and
/// the final step.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    reference: &PolicyTable,
    init: Option<&PolicyTable>,
    eval_interval: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if eval_interval == 0 {
        return Err(Error::Config("eval_interval must be positive".into()));
    }
    if reference.is_trainable() {
        return Err(Error::Config("reference policy must be frozen".into()));
    }
    if reference.num_queries() != dataset.num_queries || reference.num_responses() != dataset.num_responses {
        return Err(Error::Config(format!(
            "reference is {}x{} but the dataset has {} queries and {} responses",
            reference.num_queries(),
            reference.num_responses(),
            dataset.num_queries,
            dataset.num_responses
        )));
    }
    let mut policy = match init {
        Some(p) => {
            reference.check_same_shape(p)?;
            p.clone()
        }
        None => reference.clone(),
    };
    policy.set_trainable(true);

    let mut state = TrainState {
        step: 0,
        rms_accumulator: vec![0.0; policy.logits().len()],
        policy,
        sampler: EpochSampler::new(config.seed, dataset.len()),
    };
    let first = checkpoint(config, dataset, reference, &state.policy, 0)?;
    observer.on_checkpoint(&first, &state)?;

    for step in 1..=config.steps {
        let indices = state.sampler.next_batch(config.batch_size);
        let batch: Vec<PreferenceTuple> = indices.iter().map(|&i| dataset.tuples[i].clone()).collect();
        let mut result = method_loss(config.method, &state.policy, reference, &batch, config.beta, config.lambda)?;
        if !result.loss.is_finite() || result.gradient.iter().any(|g| !g.is_finite()) {
            let mut bad: Vec<usize> = indices
                .iter()
                .zip(&result.per_tuple_loss)
                .filter(|(_, l)| !l.is_finite())
                .map(|(&i, _)| i)
                .collect();
            if bad.is_empty() {
                bad = indices.clone();
            }
            return Err(Error::Divergence {
                step,
                tuples: bad,
                message: format!("loss {} with non-finite gradient entries", result.loss),
            });
        }
        if let Some(max_norm) = config.grad_clip_norm {
            clip_gradient(&mut result.gradient, max_norm);
        }
        rmsprop_step(
            state.policy.logits_mut(),
            &mut state.rms_accumulator,
            &result.gradient,
            config.learning_rate,
            config.rmsprop_decay,
            config.rmsprop_epsilon,
        );
        state.step = step;
        if step % eval_interval == 0 || step == config.steps {
            let cp = checkpoint(config, dataset, reference, &state.policy, step)?;
            if !cp.loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    tuples: Vec::new(),
                    message: format!("full-dataset loss became {}", cp.loss),
                });
            }
            observer.on_checkpoint(&cp, &state)?;
        }
    }
    Ok(state)
}
