//! Experiment commands behind the CLI: generation, training runs with CSV
//! and checkpoint output, lambda sweeps and verification.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{generate, prompted_initialization, Dataset, ScenarioSpec};
use crate::error::{Error, Result};
use crate::loss::Method;
use crate::metrics::{accuracy, MetricsReport};
use crate::optim::{train, Checkpoint, TrainConfig, TrainState};
use crate::policy::PolicyTable;
use crate::reward::GroundTruth;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Process exit status for each command outcome.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DIVERGED: i32 = 3;
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Divergence { .. } => exit::DIVERGED,
        _ => exit::USAGE,
    }
}

/// A flat JSON config split into its training and scenario halves. Keys that
/// belong to neither are rejected; `seed` feeds both.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scenario: ScenarioSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let known = |v: Value| match v {
            Value::Object(m) => m.into_iter().map(|(k, _)| k).collect::<BTreeSet<_>>(),
            _ => BTreeSet::new(),
        };
        let mut allowed = known(serde_json::to_value(TrainConfig::default())?);
        allowed.extend(known(serde_json::to_value(ScenarioSpec::default())?));
        if let Some(k) = map.keys().find(|k| !allowed.contains(*k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let pick = |defaults: Value| -> Value {
            let Value::Object(d) = defaults else { unreachable!() };
            Value::Object(map.iter().filter(|(k, _)| d.contains_key(*k)).map(|(k, v)| (k.clone(), v.clone())).collect::<Map<_, _>>())
        };
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        Ok(Self {
            train: serde_json::from_value(pick(serde_json::to_value(TrainConfig::default())?)).map_err(bad)?,
            scenario: serde_json::from_value(pick(serde_json::to_value(ScenarioSpec::default())?)).map_err(bad)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `overwrite`.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --overwrite to reuse it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the dataset and ground truth for `spec`; returns the tuple count.
pub fn run_gen(spec: &ScenarioSpec, out: &Path, overwrite: bool) -> Result<usize> {
    let (gt, dataset) = generate(spec)?;
    prepare_output_dir(out, overwrite)?;
    dataset.write_jsonl(&out.join(DATASET_FILE))?;
    gt.save(&out.join(GROUND_TRUTH_FILE))?;
    Ok(dataset.len())
}

/// Everything a training run consumes besides its config.
#[derive(Debug, Clone)]
pub struct TrainInputs {
    pub dataset: Dataset,
    pub reference: PolicyTable,
    pub init: Option<PolicyTable>,
}

/// Where the policies of a run come from.
#[derive(Debug, Clone, Default)]
pub struct InputPaths {
    pub data: PathBuf,
    /// Defaults to `ground_truth.json` beside the dataset when present.
    pub ground_truth: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub init: Option<PathBuf>,
}

impl TrainInputs {
    /// Resolves the reference and initial policy:
    /// an explicit reference wins; otherwise a ground truth yields the
    /// prompted initialization; otherwise a uniform augmented reference.
    pub fn load(paths: &InputPaths, beta: f64) -> Result<Self> {
        let dataset = crate::datagen::load_jsonl(&paths.data)?;
        let gt_path = paths.ground_truth.clone().or_else(|| {
            let sibling = paths.data.with_file_name(GROUND_TRUTH_FILE);
            sibling.exists().then_some(sibling)
        });
        let (mut reference, mut init) = match (&paths.reference, gt_path) {
            (Some(r), _) => (PolicyTable::load(r)?, None),
            (None, Some(g)) => {
                let gt = GroundTruth::load(&g)?;
                if gt.num_queries() != dataset.num_queries || gt.num_responses() != dataset.num_responses {
                    return Err(Error::Config(format!("ground truth {} does not match the dataset shape", g.display())));
                }
                let (init, reference) = prompted_initialization(&gt, beta, gt.prompt_gain)?;
                (reference, Some(init))
            }
            (None, None) => (PolicyTable::uniform(dataset.num_queries, dataset.num_responses, true)?, None),
        };
        if let Some(p) = &paths.init {
            init = Some(PolicyTable::load(p)?);
        }
        reference.set_trainable(false);
        Ok(Self { dataset, reference, init })
    }
}

/// One CSV row per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub avg_marginal: f64,
    pub accuracy: f64,
    pub aug_accuracy: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau: Option<f64>,
}

impl From<&Checkpoint> for MetricsRow {
    fn from(c: &Checkpoint) -> Self {
        let m = &c.metrics;
        Self {
            step: c.step,
            loss: c.loss,
            avg_marginal: m.avg_marginal,
            accuracy: m.accuracy,
            aug_accuracy: m.aug_accuracy,
            pearson: m.pearson,
            spearman: m.spearman,
            kendall_tau: m.kendall_tau,
        }
    }
}

#[derive(Debug, Serialize)]
struct CheckpointMeta<'a> {
    step: usize,
    config_hash: &'a str,
    metrics: &'a MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub state: TrainState,
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}.json"))
}

pub fn checkpoint_meta_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}.meta.json"))
}

/// Trains one run, writing `metrics.csv` and a policy checkpoint with a
/// metadata sidecar at every evaluation.
pub fn run_train(config: &TrainConfig, inputs: &TrainInputs, out: &Path, eval_interval: usize, overwrite: bool) -> Result<TrainOutcome> {
    config.validate()?;
    prepare_output_dir(out, overwrite)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let csv_path = out.join(METRICS_FILE);
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    let hash = config.config_hash();
    let mut last = None;
    let mut observer = |cp: &Checkpoint, state: &TrainState| -> Result<()> {
        writer.serialize(MetricsRow::from(cp)).map_err(|e| csv_error(&csv_path, e))?;
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        state.policy.save(&checkpoint_path(out, cp.step))?;
        let meta = CheckpointMeta {
            step: cp.step,
            config_hash: &hash,
            metrics: &cp.metrics,
        };
        let meta_path = checkpoint_meta_path(out, cp.step);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        log::info!("step {} loss {:.6} accuracy {:.4}", cp.step, cp.loss, cp.metrics.accuracy);
        last = Some(cp.clone());
        Ok(())
    };
    let state = train(config, &inputs.dataset, &inputs.reference, inputs.init.as_ref(), eval_interval, &mut observer)?;
    Ok(TrainOutcome {
        final_checkpoint: last.expect("training always emits a final checkpoint"),
        state,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Result of one lambda in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub status: String,
    pub loss: Option<f64>,
    pub avg_marginal: Option<f64>,
    pub accuracy: Option<f64>,
    pub aug_accuracy: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub selected_lambda: Option<f64>,
    pub summary_path: PathBuf,
}

pub const DEFAULT_GRID: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 1.0];

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("bad grid value {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::Argument(format!("grid must list non-negative lambdas, got {text:?}")));
    }
    Ok(grid)
}

/// Index of the best held-out accuracy; ties go to the smallest lambda.
pub fn select_lambda(candidates: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(lambda, acc)) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bl, ba) = candidates[b];
                if acc > ba || (acc == ba && lambda < bl) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Trains one refined run per lambda on all but the first `holdout_k`
/// tuples, scores each on the held-out slice and writes
/// `sweep_seed{seed}.csv`. Runs that fail are recorded and skipped.
pub fn run_sweep(
    config: &TrainConfig,
    grid: &[f64],
    holdout_k: usize,
    inputs: &TrainInputs,
    out: &Path,
    eval_interval: usize,
    overwrite: bool,
) -> Result<SweepSummary> {
    let n = inputs.dataset.len();
    if holdout_k == 0 || holdout_k >= n {
        return Err(Error::Config(format!("holdout-k must lie in [1, {}) for {n} tuples", n)));
    }
    prepare_output_dir(out, overwrite)?;
    let holdout = inputs.dataset.slice(0..holdout_k);
    let train_inputs = TrainInputs {
        dataset: inputs.dataset.slice(holdout_k..n),
        reference: inputs.reference.clone(),
        init: inputs.init.clone(),
    };
    let method: Method = config.method.refined();
    let outcomes: Vec<Result<(Checkpoint, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&lambda| {
                let cfg = TrainConfig {
                    method,
                    lambda,
                    ..config.clone()
                };
                let run_dir = out.join(format!("lambda_{lambda}"));
                let train_inputs = &train_inputs;
                let holdout = &holdout;
                scope.spawn(move || -> Result<(Checkpoint, f64)> {
                    let outcome = run_train(&cfg, train_inputs, &run_dir, eval_interval, true)?;
                    let held = accuracy(&outcome.state.policy, &train_inputs.reference, holdout, false)?;
                    Ok((outcome.final_checkpoint, held))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    let mut rows = Vec::with_capacity(grid.len());
    let mut candidates = Vec::new();
    let mut candidate_rows = Vec::new();
    for (&lambda, outcome) in grid.iter().zip(outcomes) {
        match outcome {
            Ok((cp, held)) => {
                let m = &cp.metrics;
                candidates.push((lambda, held));
                candidate_rows.push(rows.len());
                rows.push(SweepRow {
                    lambda,
                    status: "ok".into(),
                    loss: Some(cp.loss),
                    avg_marginal: Some(m.avg_marginal),
                    accuracy: Some(m.accuracy),
                    aug_accuracy: m.aug_accuracy,
                    pearson: m.pearson,
                    spearman: m.spearman,
                    kendall_tau: m.kendall_tau,
                    holdout_accuracy: Some(held),
                    selected: false,
                });
            }
            Err(e) => {
                log::error!("lambda {lambda} failed: {e}");
                rows.push(SweepRow {
                    lambda,
                    status: format!("failed: {e}"),
                    loss: None,
                    avg_marginal: None,
                    accuracy: None,
                    aug_accuracy: None,
                    pearson: None,
                    spearman: None,
                    kendall_tau: None,
                    holdout_accuracy: None,
                    selected: false,
                });
            }
        }
    }
    let selected_lambda = select_lambda(&candidates).map(|i| {
        rows[candidate_rows[i]].selected = true;
        candidates[i].0
    });

    let summary_path = out.join(format!("sweep_seed{}.csv", config.seed));
    let mut writer = csv::Writer::from_path(&summary_path).map_err(|e| csv_error(&summary_path, e))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| csv_error(&summary_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&summary_path, e))?;
    Ok(SweepSummary {
        rows,
        selected_lambda,
        summary_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_prefers_smallest_lambda_on_ties() {
        assert_eq!(select_lambda(&[(0.5, 0.9), (0.1, 0.9), (1.0, 0.8)]), Some(1));
        assert_eq!(select_lambda(&[(0.0, 0.5), (0.3, 0.7)]), Some(1));
        assert_eq!(select_lambda(&[]), None);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0, 0.1,1").unwrap(), vec![0.0, 0.1, 1.0]);
        assert!(parse_grid("0,x").is_err());
        assert!(parse_grid("-1").is_err());
    }

    #[test]
    fn flat_config_splits_and_rejects_unknown_keys() {
        let c = RunConfig::from_json(r#"{"seed": 7, "method": "sr-ipo", "num_queries": 3}"#).unwrap();
        assert_eq!((c.train.seed, c.scenario.seed), (7, 7));
        assert_eq!(c.train.method, Method::SrIpo);
        assert_eq!(c.scenario.num_queries, 3);
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(Error::Config(_))));
    }
}
