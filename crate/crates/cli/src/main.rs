//! `ipslearn`: simulate data, evaluate policies, learn constrained policies
//! and replicate the simulation figures.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "ipslearn",
    version,
    about = "Off-policy evaluation and constrained learning with incremental propensity score policies"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print resolved settings and progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset with both potential outcomes.
    Simulate(SimulateArgs),
    /// Estimate the value of a fixed policy.
    Evaluate(EvaluateArgs),
    /// Learn a policy, optionally under a constraint.
    Learn(LearnArgs),
    /// Run a figure's Monte Carlo experiment.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Column roles of an input CSV.
#[derive(Debug, Clone, Args)]
pub struct SchemaArgs {
    /// Outcome column.
    #[arg(long, default_value = "y")]
    outcome: String,
    /// Treatment column (0/1).
    #[arg(long, default_value = "a")]
    treatment: String,
    /// Sensitive-attribute column. Defaults to `s` when such a column exists.
    #[arg(long)]
    sensitive: Option<String>,
    /// Ignore any sensitive column, even one named `s`.
    #[arg(long, conflicts_with = "sensitive")]
    no_sensitive: bool,
    /// Covariate columns, comma separated. Defaults to every remaining
    /// column except `y0`, `y1` and `true_pi`.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Extra columns to skip, comma separated.
    #[arg(long, value_delimiter = ',')]
    ignore: Vec<String>,
}

/// Nuisance learners: a name (`logistic`, `ridge`, `boosted_trees`) or a
/// path to a JSON learner spec.
#[derive(Debug, Clone, Args)]
pub struct LearnerArgs {
    #[arg(long, default_value = "logistic")]
    learner_pi: String,
    #[arg(long, default_value = "boosted_trees")]
    learner_mu: String,
}

#[derive(Debug, Clone, Args)]
pub struct ConstraintArgs {
    /// none, dp, eo, budget or quantile.
    #[arg(long)]
    constraint: Option<String>,
    /// Bound `b` of the constraint.
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Quantile level for `--constraint quantile`.
    #[arg(long)]
    quantile_tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    scenario: String,
    /// Rows to draw (ignored for semi_synthetic_formula).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, env = "IPSLEARN_SEED", default_value_t = 0)]
    seed: u64,
    /// Output CSV; `-` for stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Covariate CSV for the semi-synthetic scenario.
    #[arg(long)]
    covariates_csv: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Policy JSON, or the JSON written by `learn`.
    #[arg(long, conflicts_with = "beta")]
    policy: Option<PathBuf>,
    /// Inline coefficients, comma separated (intercept first).
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required_unless_present = "policy"
    )]
    beta: Vec<f64>,
    /// Class of `--beta`; defaults to the class of the estimators.
    #[arg(long)]
    policy_class: Option<String>,
    /// Estimator tags, comma separated, or `all`.
    #[arg(long, default_value = "ONE_STEP", value_delimiter = ',')]
    estimator: Vec<String>,
    #[command(flatten)]
    learners: LearnerArgs,
    /// Folds for CROSS_FIT.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Seed of the fold assignment.
    #[arg(long, env = "IPSLEARN_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Problem JSON; flags below override its fields.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    policy_class: Option<String>,
    #[command(flatten)]
    constraint: ConstraintArgs,
    /// genetic or cobyla, for linear rules.
    #[arg(long)]
    linear_search: Option<String>,
    #[command(flatten)]
    learners: LearnerArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, env = "IPSLEARN_SEED")]
    seed: Option<u64>,
    /// Result JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Also write the best-so-far trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    /// fig1a, figS1a or figS1b.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    figure: Option<String>,
    /// Experiment config JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, env = "IPSLEARN_SEED")]
    seed: Option<u64>,
    /// Estimator tags, comma separated.
    #[arg(long, value_delimiter = ',')]
    estimator: Vec<String>,
    #[command(flatten)]
    constraint: ConstraintArgs,
    #[arg(long)]
    learner_pi: Option<String>,
    #[arg(long)]
    learner_mu: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Use the cross-fitted one-step estimator for the One-step method.
    #[arg(long)]
    cross_fit: bool,
    /// genetic or cobyla, for linear rules.
    #[arg(long)]
    linear_search: Option<String>,
    /// Record learning wall-clock time (output is then not reproducible).
    #[arg(long)]
    timing: bool,
    /// Per-repetition table; the summary goes next to it with a
    /// `.summary.csv` suffix. Both go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input data.
    Usage(anyhow::Error),
    /// Anything that went wrong after inputs were accepted.
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Internal(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
    }
    let ctx = commands::Context {
        threads: cli.threads,
        verbose: cli.verbose,
    };
    let outcome = match cli.command {
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Evaluate(a) => ctx.in_pool(|| commands::evaluate(&ctx, a)),
        Command::Learn(a) => ctx.in_pool(|| commands::learn(&ctx, a)),
        Command::Replicate(a) => commands::replicate(&ctx, a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Internal(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
