//! Preference optimization over tabular softmax policies.
//!
//! The crate implements DPO, IPO and their self-refined variants (Sr-DPO,
//! Sr-IPO), in which a refinement computed from the policy's own
//! prompt-augmented implicit reward rescales each tuple's margin. A synthetic
//! ground-truth reward makes every ordering claim about the refinement
//! checkable by enumeration.
//!
//! Module map:
//! - [`policy`]: logit tables, log-probabilities, implicit reward differences
//! - [`reward`]: ground truth and the Bradley-Terry model
//! - [`refine`]: refinement functions and their ordering checks
//! - [`loss`]: the four objectives with exact gradients
//! - [`optim`]: RMSprop training loop
//! - [`datagen`]: synthetic scenarios and JSONL datasets
//! - [`metrics`]: margins, accuracies, correlations, simulated judge
//! - [`verify`]: the registered property checks
//! - [`runner`]: the experiment commands behind the CLI

pub mod datagen;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod refine;
pub mod reward;
pub mod runner;
pub mod verify;

pub use datagen::{Dataset, PreferenceTuple, RewardDistribution, ScenarioSpec};
pub use error::{Error, Result};
pub use loss::{LossBatchResult, Method};
pub use metrics::MetricsReport;
pub use optim::{TrainConfig, TrainState};
pub use policy::{ContextId, PolicyTable, ResponseId};
pub use reward::GroundTruth;
