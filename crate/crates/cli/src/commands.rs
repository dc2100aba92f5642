use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use ipslearn::data::CsvSchema;
use ipslearn::experiment::{run_experiment, write_rows_csv, write_summary_csv, ExperimentConfig, Figure, RunOptions};
use ipslearn::learn::{learn_policy, LearnProblem, LearnResult, LinearSearch, PolicyClass};
use ipslearn::nuisance::{fit_crossfit, fit_full, LearnerSpec, NuisancePredictions};
use ipslearn::ope::{estimate, Estimator, FoldWeighting, UnitData, ValueEstimate};
use ipslearn::policy::{IncrementalPolicy, LinearRulePolicy, Policy};
use ipslearn::sim::{self, DgpSpec, Scenario};
use serde::Serialize;

use crate::io::{self, lib, Classify, CliResult, Metadata, Sink};
use crate::{EvaluateArgs, Format, LearnArgs, ReplicateArgs, SimulateArgs};

pub struct Context {
    pub threads: Option<usize>,
    pub verbose: u8,
}

impl Context {
    /// Runs `f` on a pool capped at `--threads`.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = self.threads {
            builder = builder.num_threads(t);
        }
        builder.build().internal()?.install(f)
    }

    fn note(&self, msg: impl FnOnce() -> String) {
        if self.verbose > 0 {
            eprintln!("{}", msg());
        }
    }
}

fn parse_linear_search(s: &str) -> CliResult<LinearSearch> {
    match s.trim().to_ascii_lowercase().as_str() {
        "genetic" => Ok(LinearSearch::Genetic),
        "cobyla" => Ok(LinearSearch::Cobyla),
        other => Err(crate::Failure::Usage(anyhow!(
            "unknown linear search `{other}` (expected genetic or cobyla)"
        ))),
    }
}

fn parse_estimators(tags: &[String]) -> CliResult<Vec<Estimator>> {
    if tags.len() == 1 && tags[0].trim().eq_ignore_ascii_case("all") {
        return Ok(Estimator::ALL.to_vec());
    }
    let mut out = Vec::new();
    for t in tags {
        let e: Estimator = lib(t.parse())?;
        if !out.contains(&e) {
            out.push(e);
        }
    }
    if out.is_empty() {
        return Err(crate::Failure::Usage(anyhow!("no estimator given")));
    }
    Ok(out)
}

fn class_of(est: Estimator) -> PolicyClass {
    if est.is_incremental() {
        PolicyClass::Ips
    } else {
        PolicyClass::Linear
    }
}

#[derive(Serialize)]
struct SimulateConfig<'a> {
    scenario: Scenario,
    n: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariates_csv: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    schema: Option<CsvSchema>,
}

pub fn simulate(ctx: &Context, a: SimulateArgs) -> CliResult<()> {
    if a.format != Format::Csv {
        return Err(crate::Failure::Usage(anyhow!("simulate writes CSV only")));
    }
    let scenario: Scenario = lib(a.scenario.parse())?;
    let (pd, schema) = if scenario == Scenario::SemiSyntheticFormula {
        let path = a
            .covariates_csv
            .as_deref()
            .ok_or_else(|| crate::Failure::Usage(anyhow!("{scenario} needs --covariates-csv")))?;
        let (ds, schema) = io::load_covariates(path, &a.schema)?;
        (lib(sim::semi_synthetic(&ds, a.seed))?, Some(schema))
    } else {
        let n =
            a.n.ok_or_else(|| crate::Failure::Usage(anyhow!("--n is required for {scenario}")))?;
        if n == 0 {
            return Err(crate::Failure::Usage(anyhow!("--n must be at least 1")));
        }
        (
            lib(sim::generate(&DgpSpec {
                scenario,
                n,
                seed: a.seed,
            }))?,
            None,
        )
    };
    let config = SimulateConfig {
        scenario,
        n: pd.n(),
        seed: a.seed,
        covariates_csv: a.covariates_csv.as_deref(),
        schema,
    };
    ctx.note(|| format!("simulate: {} rows of {scenario}", pd.n()));
    let mut sink = Sink::new(Some(&a.out));
    let meta = Metadata::new("simulate", a.seed, &config).comment_line()?;
    sink.buffer().extend_from_slice(meta.as_bytes());
    {
        let mut w = csv::Writer::from_writer(sink.buffer());
        lib(pd.write_csv_to(&mut w))?;
        w.flush().internal()?;
    }
    sink.finish()
}

/// A policy as supplied on the command line.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
enum PolicySource {
    Stored(Policy),
    Inline { beta: Vec<f64>, class: Option<PolicyClass> },
}

impl PolicySource {
    fn read(path: &Path) -> CliResult<Self> {
        let text = io::read_text(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("policy file {}", path.display()))
            .usage()?;
        // Accept the output of `learn` as well as a bare policy.
        let inner = value
            .pointer("/result/policy")
            .or_else(|| value.get("policy"))
            .cloned()
            .unwrap_or(value);
        let policy: Policy = serde_json::from_value(inner)
            .with_context(|| format!("policy file {}", path.display()))
            .usage()?;
        Ok(PolicySource::Stored(policy))
    }

    fn class(&self) -> Option<PolicyClass> {
        match self {
            PolicySource::Stored(Policy::Ips(_)) => Some(PolicyClass::Ips),
            PolicySource::Stored(Policy::Linear(_)) => Some(PolicyClass::Linear),
            PolicySource::Inline { class, .. } => *class,
        }
    }

    fn as_ips(&self) -> IncrementalPolicy {
        match self {
            PolicySource::Stored(Policy::Ips(p)) => p.clone(),
            PolicySource::Stored(Policy::Linear(l)) => IncrementalPolicy {
                feature_map: l.feature_map.clone(),
                ..IncrementalPolicy::new(l.beta().to_vec())
            },
            PolicySource::Inline { beta, .. } => IncrementalPolicy::new(beta.clone()),
        }
    }

    fn as_linear(&self) -> ipslearn::Result<LinearRulePolicy> {
        match self {
            PolicySource::Stored(Policy::Linear(l)) => Ok(l.clone()),
            PolicySource::Stored(Policy::Ips(p)) => LinearRulePolicy::new(p.beta.clone(), p.feature_map.clone()),
            PolicySource::Inline { beta, .. } => LinearRulePolicy::new(beta.clone(), Default::default()),
        }
    }
}

#[derive(Serialize)]
struct EvaluateConfig<'a> {
    data: &'a Path,
    schema: &'a CsvSchema,
    policy: &'a PolicySource,
    estimators: &'a [Estimator],
    learner_pi: &'a LearnerSpec,
    learner_mu: &'a LearnerSpec,
    folds: usize,
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    metadata: Metadata<'a, EvaluateConfig<'a>>,
    estimates: &'a [ValueEstimate],
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> CliResult<()> {
    let estimators = parse_estimators(&a.estimator)?;
    let policy = match &a.policy {
        Some(p) => PolicySource::read(p)?,
        None => PolicySource::Inline {
            beta: a.beta.clone(),
            class: a
                .policy_class
                .as_deref()
                .map(PolicyClass::parse)
                .transpose()
                .map_err(io::classify)?,
        },
    };
    // A policy is read in the other class only when the estimators ask for
    // both classes at once.
    let mixed = estimators.iter().any(|e| e.is_incremental()) && estimators.iter().any(|e| !e.is_incremental());
    if let Some(class) = policy.class() {
        if !mixed && estimators.iter().any(|&e| class_of(e) != class) {
            return Err(crate::Failure::Usage(anyhow!(
                "a {class:?} policy cannot be evaluated by {}",
                estimators.iter().map(|e| e.tag()).collect::<Vec<_>>().join(",")
            )));
        }
    }
    let pi = io::learner(&a.learners.learner_pi)?;
    let mu = io::learner(&a.learners.learner_mu)?;
    let (ds, schema) = io::load_data(&a.data, &a.schema)?;
    ctx.note(|| format!("evaluate: n = {}, {} estimators", ds.n(), estimators.len()));

    let rows = ds.unit_rows();
    let needs_full = estimators.iter().any(|&e| e != Estimator::CrossFit);
    let full: Option<NuisancePredictions> = if needs_full {
        let fit = lib(fit_full(&ds, &pi, &mu))?;
        Some(lib(fit.predict(&rows))?)
    } else {
        None
    };
    let cross = if estimators.contains(&Estimator::CrossFit) {
        if !(2..=ds.n()).contains(&a.folds) {
            return Err(crate::Failure::Usage(anyhow!("--folds must lie in 2..={}", ds.n())));
        }
        let cfn = lib(fit_crossfit(&ds, a.folds, a.seed, &pi, &mu))?;
        let preds = lib(cfn.predict(&ds))?;
        Some((cfn, preds))
    } else {
        None
    };

    let ips = policy.as_ips();
    let linear = policy.as_linear();
    let mut estimates = Vec::with_capacity(estimators.len());
    for &est in &estimators {
        let (preds, folds) = match (&cross, est) {
            (Some((cfn, p)), Estimator::CrossFit) => (p, Some(&cfn.folds)),
            _ => (full.as_ref().expect("full-sample fit"), None),
        };
        let u = lib(UnitData::new(ds.a(), ds.y(), preds))?;
        let input = if est.is_incremental() {
            lib(ips.validate())?;
            lib(ips.deltas(&lib(ips.feature_map.matrix(&rows))?))?
        } else {
            match &linear {
                Ok(l) => lib(l.decide(&lib(l.feature_map.matrix(&rows))?))?,
                Err(e) if mixed => {
                    estimates.push(ValueEstimate::failed(
                        est,
                        ds.n(),
                        format!("not a valid linear rule: {e}"),
                    ));
                    continue;
                }
                Err(e) => return Err(crate::Failure::Usage(anyhow!("{e}"))),
            }
        };
        estimates.push(lib(estimate(est, &u, &input, folds, FoldWeighting::Equal))?);
    }

    let config = EvaluateConfig {
        data: &a.data,
        schema: &schema,
        policy: &policy,
        estimators: &estimators,
        learner_pi: &pi,
        learner_mu: &mu,
        folds: a.folds,
    };
    let meta = Metadata::new("evaluate", a.seed, &config);
    let mut sink = Sink::new(a.out.as_deref());
    match a.format {
        Format::Json => {
            let body = io::to_json(&EvaluateOutput {
                metadata: meta,
                estimates: &estimates,
            })?;
            sink.buffer().extend_from_slice(&body);
        }
        Format::Csv => {
            let line = meta.comment_line()?;
            sink.buffer().extend_from_slice(line.as_bytes());
            let mut w = csv::Writer::from_writer(sink.buffer());
            w.write_record(ValueEstimate::CSV_HEADER).internal()?;
            for e in &estimates {
                w.write_record(e.csv_record()).internal()?;
            }
            w.flush().internal()?;
        }
    }
    sink.finish()
}

#[derive(Serialize)]
struct LearnConfig<'a> {
    data: &'a Path,
    schema: &'a CsvSchema,
    problem: &'a LearnProblem,
    learner_pi: &'a LearnerSpec,
    learner_mu: &'a LearnerSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
}

#[derive(Serialize)]
struct LearnOutput<'a> {
    metadata: Metadata<'a, LearnConfig<'a>>,
    result: &'a LearnResult,
}

fn resolve_problem(a: &LearnArgs) -> CliResult<LearnProblem> {
    let mut problem = match &a.problem {
        Some(path) => {
            let text = io::read_text(path)?;
            serde_json::from_str::<LearnProblem>(&text)
                .with_context(|| format!("problem file {}", path.display()))
                .usage()?
        }
        None => LearnProblem::new(Estimator::OneStep, PolicyClass::Ips),
    };
    if let Some(tag) = &a.estimator {
        problem.value_estimator = lib(tag.parse())?;
        if a.policy_class.is_none() {
            problem.policy_class = class_of(problem.value_estimator);
        }
    }
    if let Some(c) = &a.policy_class {
        problem.policy_class = lib(PolicyClass::parse(c))?;
    }
    problem.constraint = io::constraint(&a.constraint, problem.constraint)?;
    if let Some(seed) = a.seed {
        problem.seed = seed;
    }
    if let Some(s) = &a.linear_search {
        problem.linear_search = parse_linear_search(s)?;
    }
    lib(problem.validate())?;
    Ok(problem)
}

pub fn learn(ctx: &Context, a: LearnArgs) -> CliResult<()> {
    let problem = resolve_problem(&a)?;
    let pi = io::learner(&a.learners.learner_pi)?;
    let mu = io::learner(&a.learners.learner_mu)?;
    let (ds, schema) = io::load_data(&a.data, &a.schema)?;
    ctx.note(|| {
        format!(
            "learn: n = {}, problem = {}",
            ds.n(),
            serde_json::to_string(&problem).unwrap_or_default()
        )
    });
    let cross = problem.value_estimator == Estimator::CrossFit;
    let result = if cross {
        if !(2..=ds.n()).contains(&a.folds) {
            return Err(crate::Failure::Usage(anyhow!("--folds must lie in 2..={}", ds.n())));
        }
        let cfn = lib(fit_crossfit(&ds, a.folds, problem.seed, &pi, &mu))?;
        lib(learn_policy(&ds, &cfn, &problem))?
    } else {
        let fit = lib(fit_full(&ds, &pi, &mu))?;
        lib(learn_policy(&ds, &fit, &problem))?
    };
    ctx.note(|| {
        format!(
            "learn: value {} converged {} feasible {}",
            result.value_at_opt.value, result.converged, result.feasible
        )
    });

    let config = LearnConfig {
        data: &a.data,
        schema: &schema,
        problem: &problem,
        learner_pi: &pi,
        learner_mu: &mu,
        folds: cross.then_some(a.folds),
    };
    let meta = Metadata::new("learn", problem.seed, &config);
    if let Some(path) = &a.trace {
        let mut sink = Sink::new(Some(path));
        sink.buffer().extend_from_slice(meta.comment_line()?.as_bytes());
        let mut w = csv::Writer::from_writer(sink.buffer());
        w.write_record(["iteration", "objective", "violation"]).internal()?;
        for t in &result.trace {
            w.write_record([
                t.iteration.to_string(),
                t.objective.to_string(),
                t.violation.to_string(),
            ])
            .internal()?;
        }
        w.flush().internal()?;
        drop(w);
        sink.finish()?;
    }
    let mut sink = Sink::new(a.out.as_deref());
    match a.format {
        Format::Json => {
            let body = io::to_json(&LearnOutput {
                metadata: meta,
                result: &result,
            })?;
            sink.buffer().extend_from_slice(&body);
        }
        Format::Csv => {
            sink.buffer().extend_from_slice(meta.comment_line()?.as_bytes());
            let mut w = csv::Writer::from_writer(sink.buffer());
            w.write_record([
                "estimator",
                "value",
                "std_error",
                "constraint_at_opt",
                "constraint_residual",
                "n_evals",
                "na_evals",
                "converged",
                "feasible",
                "beta",
            ])
            .internal()?;
            let beta: Vec<String> = result.beta_hat.iter().map(f64::to_string).collect();
            let v = &result.value_at_opt;
            w.write_record([
                v.estimator.tag().to_string(),
                v.value.to_string(),
                v.std_error.map(|s| s.to_string()).unwrap_or_default(),
                result.constraint_at_opt.to_string(),
                result.constraint_residual.to_string(),
                result.n_evals.to_string(),
                result.na_evals.to_string(),
                result.converged.to_string(),
                result.feasible.to_string(),
                beta.join(" "),
            ])
            .internal()?;
            w.flush().internal()?;
        }
    }
    sink.finish()
}

fn resolve_experiment(a: &ReplicateArgs) -> CliResult<ExperimentConfig> {
    let mut config = match (&a.config, &a.figure) {
        (Some(path), _) => {
            let text = io::read_text(path)?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("experiment config {}", path.display()))
                .usage()?
        }
        (None, Some(fig)) => ExperimentConfig::preset(lib(fig.parse::<Figure>())?),
        (None, None) => return Err(crate::Failure::Usage(anyhow!("--figure or --config is required"))),
    };
    if let Some(s) = &a.scenario {
        config.scenario = lib(s.parse())?;
    }
    if let Some(r) = a.reps {
        config.reps = r;
    }
    if let Some(n) = a.n {
        config.n_train = n;
    }
    if let Some(n) = a.n_test {
        config.n_test = n;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if !a.estimator.is_empty() {
        config.methods = parse_estimators(&a.estimator)?;
    }
    config.constraint = io::constraint(&a.constraint, config.constraint)?;
    if let Some(l) = &a.learner_pi {
        config.learner_pi = io::learner(l)?;
    }
    if let Some(l) = &a.learner_mu {
        config.learner_mu = io::learner(l)?;
    }
    if let Some(k) = a.folds {
        config.folds = k;
    }
    if let Some(s) = &a.linear_search {
        config.search.linear_search = parse_linear_search(s)?;
    }
    if a.cross_fit {
        config = config.with_cross_fit();
    }
    lib(config.validate())?;
    Ok(config)
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.summary.csv"))
}

pub fn replicate(ctx: &Context, a: ReplicateArgs) -> CliResult<()> {
    let config = resolve_experiment(&a)?;
    ctx.note(|| format!("replicate: {}", serde_json::to_string(&config).unwrap_or_default()));
    let opts = RunOptions {
        threads: ctx.threads,
        timing: a.timing,
    };
    let table = lib(run_experiment(&config, opts))?;
    let to_file = a.out.as_deref().filter(|p| p.as_os_str() != "-");
    let mut sink = Sink::new(to_file);
    match a.format {
        Format::Json => {
            let body = io::to_json(&table)?;
            sink.buffer().extend_from_slice(&body);
        }
        Format::Csv => {
            lib(write_rows_csv(&table, sink.buffer()))?;
            match to_file {
                Some(path) => {
                    let mut summary = Sink::new(Some(&summary_path(path)));
                    lib(write_summary_csv(&table, summary.buffer()))?;
                    summary.finish()?;
                }
                None => {
                    sink.buffer().push(b'\n');
                    lib(write_summary_csv(&table, sink.buffer()))?;
                }
            }
        }
    }
    sink.finish()
}
