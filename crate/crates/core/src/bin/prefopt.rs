use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prefopt::runner::{self, exit, InputPaths, RunConfig, TrainInputs};
use prefopt::verify::{self, Fault, VerifyOptions};
use prefopt::{Error, Method, Result, RewardDistribution};

#[derive(Parser)]
#[command(name = "prefopt", version, about = "Tabular preference-optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth reward.
    Gen(GenArgs),
    /// Train one policy and write metrics and checkpoints.
    Train(TrainArgs),
    /// Train one run per lambda and select by held-out accuracy.
    Sweep(SweepArgs),
    /// Run the registered property checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// Flat JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    num_responses: Option<usize>,
    /// uniform:lo,hi | gaussian:mu,sigma | two_cluster:small,large,mix
    #[arg(long)]
    distribution: Option<RewardDistribution>,
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    tuples_per_query: Option<usize>,
    #[arg(long)]
    prompt_gain: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset JSONL.
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth JSON (default: ground_truth.json beside the dataset).
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Reference policy JSON; overrides the ground-truth construction.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Initial trainable policy JSON.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 100)]
    eval_interval: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "0,0.1,0.3,0.5,1")]
    grid: String,
    /// Leading tuples held out for lambda selection.
    #[arg(long, default_value_t = 50)]
    holdout_k: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print check names without running them.
    #[arg(long)]
    list: bool,
    /// Run only the named checks.
    #[arg(long = "check")]
    checks: Vec<String>,
    /// Inject a known defect (flip-delta-sign).
    #[arg(long)]
    fault: Option<Fault>,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.scenario.seed = seed;
    }
    Ok(config)
}

fn cmd_gen(args: GenArgs) -> Result<i32> {
    let mut spec = load_config(&args.common)?.scenario;
    if let Some(v) = args.num_queries {
        spec.num_queries = v;
    }
    if let Some(v) = args.num_responses {
        spec.num_responses = v;
    }
    if let Some(v) = args.distribution {
        spec.reward_distribution = v;
    }
    if let Some(v) = args.label_noise {
        spec.label_noise = v;
    }
    if let Some(v) = args.tuples_per_query {
        spec.tuples_per_query = v;
    }
    if let Some(v) = args.prompt_gain {
        spec.prompt_gain = v;
    }
    let count = runner::run_gen(&spec, &args.common.out, args.common.overwrite)?;
    println!("{count}");
    Ok(exit::SUCCESS)
}

fn train_setup(args: &TrainArgs) -> Result<(prefopt::TrainConfig, TrainInputs)> {
    let mut config = load_config(&args.common)?.train;
    if let Some(v) = args.method {
        config.method = v;
    }
    if let Some(v) = args.beta {
        config.beta = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    let paths = InputPaths {
        data: args.data.clone(),
        ground_truth: args.ground_truth.clone(),
        reference: args.reference.clone(),
        init: args.init.clone(),
    };
    let inputs = TrainInputs::load(&paths, config.beta)?;
    Ok((config, inputs))
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let (config, inputs) = train_setup(&args)?;
    let outcome = runner::run_train(&config, &inputs, &args.common.out, args.eval_interval, args.common.overwrite)?;
    println!("{}", serde_json::to_string(&outcome.final_checkpoint.metrics)?);
    Ok(exit::SUCCESS)
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let grid = runner::parse_grid(&args.grid)?;
    let (config, inputs) = train_setup(&args.train)?;
    let summary = runner::run_sweep(
        &config,
        &grid,
        args.holdout_k,
        &inputs,
        &args.train.common.out,
        args.train.eval_interval,
        args.train.common.overwrite,
    )?;
    println!("summary: {}", summary.summary_path.display());
    match summary.selected_lambda {
        Some(l) => println!("selected lambda: {l}"),
        None => {
            println!("selected lambda: none (every run failed)");
            return Ok(exit::DIVERGED);
        }
    }
    Ok(exit::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    if args.list {
        for name in verify::check_names() {
            println!("{name}");
        }
        return Ok(exit::SUCCESS);
    }
    let options = VerifyOptions {
        seed: args.seed,
        fault: args.fault,
    };
    let report = if args.checks.is_empty() {
        verify::run_all(&options)?
    } else {
        let checks = args
            .checks
            .iter()
            .map(|c| verify::run_check(c, &options))
            .collect::<Result<Vec<_>>>()?;
        verify::VerifyReport {
            seed: options.seed,
            fault: options.fault,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    };
    for c in &report.checks {
        println!(
            "{:<28} {}  observed {:.3e}  threshold {:.1e}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.observed,
            c.threshold,
            c.detail
        );
    }
    if report.passed {
        Ok(exit::SUCCESS)
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
        Ok(exit::VERIFY_FAILED)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PREFOPT_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    };
    let code = outcome.unwrap_or_else(|e: Error| {
        eprintln!("error: {e}");
        runner::exit_code(&e)
    });
    ExitCode::from(code as u8)
}
