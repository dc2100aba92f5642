//! Monte Carlo experiment runner: repeated train/learn/test cycles that
//! score each learning method by the true value of the policy it returns.
//!
//! Every repetition owns independent random streams derived from the
//! master seed, repetitions run on a rayon pool, and the table is assembled
//! in repetition order, so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::learn::{learn_policy, LearnProblem, LearnResult, LinearSearch, Nuisances, PolicyClass};
use crate::nuisance::{fit_crossfit, fit_full, CrossFitNuisance, LearnerSpec, NuisanceFit};
use crate::numeric::{quantile_sorted, stream, StreamTag};
use crate::ope::{Estimator, FoldWeighting};
use crate::policy::{eval_linear, ips_prob_unchecked, Policy};
use crate::sim::{generate_with, parametric_specs, true_optimal_value, true_value, PotentialDataset, Scenario};

/// Figure-legend name of the method that learns with `est`.
pub fn method_name(est: Estimator) -> &'static str {
    match est {
        Estimator::OrStd => "OR",
        Estimator::IpwStd => "IPW",
        Estimator::AipwStd => "AIPW",
        Estimator::OrIps => "OR-IPS",
        Estimator::IpwIps => "IPW-IPS",
        Estimator::OneStep | Estimator::CrossFit => "One-step",
    }
}

/// Which propensity a learned incremental policy uses on test units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestPropensity {
    /// The training-sample fit travels with the policy.
    #[default]
    Fitted,
    /// The data-generating propensity (diagnostic only).
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Figure {
    #[serde(rename = "fig1a")]
    Fig1a,
    #[serde(rename = "figS1a")]
    FigS1a,
    #[serde(rename = "figS1b")]
    FigS1b,
}

impl Figure {
    pub fn tag(self) -> &'static str {
        match self {
            Figure::Fig1a => "fig1a",
            Figure::FigS1a => "figS1a",
            Figure::FigS1b => "figS1b",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Figure::Fig1a, Figure::FigS1a, Figure::FigS1b]
            .into_iter()
            .find(|f| f.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown figure `{s}` (expected fig1a, figS1a or figS1b)")))
    }
}

/// Optimizer settings shared by every learning run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSettings {
    pub linear_search: LinearSearch,
    pub restarts: usize,
    pub max_evals: usize,
    pub generations: usize,
    pub population: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            linear_search: LinearSearch::Genetic,
            restarts: 5,
            max_evals: 5000,
            generations: 200,
            population: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n_train: usize,
    pub n_test: usize,
    pub reps: usize,
    pub methods: Vec<Estimator>,
    #[serde(default)]
    pub constraint: ConstraintSpec,
    pub learner_pi: LearnerSpec,
    pub learner_mu: LearnerSpec,
    #[serde(default)]
    pub seed: u64,
    /// Fold count for cross-fitted methods.
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub fold_weighting: FoldWeighting,
    #[serde(default)]
    pub test_propensity: TestPropensity,
    #[serde(default)]
    pub search: SearchSettings,
}

fn default_folds() -> usize {
    5
}

impl ExperimentConfig {
    /// Full-scale settings of a figure. The constrained fair-DP
    /// figures solve both policy classes with the trust-region solver; the
    /// sufficient-overlap figure uses genetic search for linear rules.
    pub fn preset(figure: Figure) -> Self {
        let methods = vec![
            Estimator::IpwStd,
            Estimator::OrStd,
            Estimator::AipwStd,
            Estimator::IpwIps,
            Estimator::OrIps,
            Estimator::OneStep,
        ];
        let trees = LearnerSpec::boosted_trees();
        let base = Self {
            scenario: Scenario::FairDp,
            n_train: 1000,
            n_test: 100_000,
            reps: 100,
            methods,
            constraint: ConstraintSpec::dp(0.01),
            learner_pi: trees.clone(),
            learner_mu: trees,
            seed: 0,
            folds: default_folds(),
            fold_weighting: FoldWeighting::Equal,
            test_propensity: TestPropensity::Fitted,
            search: SearchSettings {
                linear_search: LinearSearch::Cobyla,
                ..SearchSettings::default()
            },
        };
        match figure {
            Figure::Fig1a => base,
            Figure::FigS1a => Self {
                scenario: Scenario::SufficientOverlap,
                n_train: 2000,
                constraint: ConstraintSpec::none(),
                search: SearchSettings::default(),
                ..base
            },
            Figure::FigS1b => {
                let (pi, mu) = parametric_specs(Scenario::FairDpParametric).expect("synthetic scenario");
                Self {
                    scenario: Scenario::FairDpParametric,
                    n_train: 500,
                    learner_pi: pi,
                    learner_mu: mu,
                    ..base
                }
            }
        }
    }

    /// Replaces the one-step method by its cross-fitted version.
    pub fn with_cross_fit(mut self) -> Self {
        for m in &mut self.methods {
            if *m == Estimator::OneStep {
                *m = Estimator::CrossFit;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario == Scenario::SemiSyntheticFormula {
            return Err(Error::invalid("experiments need a synthetic scenario"));
        }
        if self.n_train < 2 || self.n_test == 0 || self.reps == 0 {
            return Err(Error::invalid("n_train >= 2, n_test >= 1 and reps >= 1 are required"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods selected"));
        }
        if self.methods.contains(&Estimator::CrossFit) && !(2..=self.n_train).contains(&self.folds) {
            return Err(Error::invalid(format!("folds must lie in 2..={}", self.n_train)));
        }
        self.constraint.validate()?;
        self.learner_pi.validate()?;
        self.learner_mu.validate()?;
        Ok(())
    }

    fn problem(&self, est: Estimator, seed: u64) -> LearnProblem {
        let class = if est.is_incremental() {
            PolicyClass::Ips
        } else {
            PolicyClass::Linear
        };
        let mut p = LearnProblem::new(est, class)
            .with_constraint(self.constraint)
            .with_seed(seed);
        p.fold_weighting = self.fold_weighting;
        p.linear_search = self.search.linear_search;
        p.restarts = self.search.restarts;
        p.cobyla.max_evals = self.search.max_evals;
        p.genetic.generations = self.search.generations;
        p.genetic.population = self.search.population;
        p
    }
}

/// One (repetition, method) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub rep: usize,
    pub method: String,
    pub estimator: Estimator,
    /// True value of the learned policy on the test set; NaN when failed.
    pub achieved_value: f64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Candidate policies for which the estimator returned NA.
    pub na_evals: usize,
    pub converged: bool,
    pub feasible: bool,
    /// Constraint metric of the learned policy on the training sample.
    pub train_constraint: f64,
    /// Estimated value of the learned policy on the training sample.
    pub train_estimate: f64,
    /// Value of the unconstrained optimal rule on this repetition's test set.
    pub test_optimal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learn_seconds: Option<f64>,
    #[serde(skip)]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub estimator: Estimator,
    pub n_reps: usize,
    pub n_failed: usize,
    /// Repetitions in which the estimator returned NA at least once.
    pub n_na_reps: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub artifact: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Metadata {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            artifact: "ipslearn".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub metadata: Metadata,
    pub rows: Vec<RepRow>,
    pub summary: Vec<SummaryRow>,
    /// Mean over repetitions of the test-set optimal value.
    pub true_optimal_value: f64,
}

/// Knobs that change how an experiment runs but not its results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker cap; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Record wall-clock learning time (makes tables non-reproducible).
    pub timing: bool,
}

pub fn run_experiment(config: &ExperimentConfig, opts: RunOptions) -> Result<ResultTable> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = opts.threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let per_rep: Vec<Result<Vec<RepRow>>> = pool.install(|| {
        (0..config.reps)
            .into_par_iter()
            .map(|r| run_rep(config, r, opts.timing))
            .collect()
    });
    let mut rows = Vec::with_capacity(config.reps * config.methods.len());
    for r in per_rep {
        rows.extend(r?);
    }
    Ok(assemble(config, rows))
}

fn assemble(config: &ExperimentConfig, rows: Vec<RepRow>) -> ResultTable {
    let summary = config
        .methods
        .iter()
        .map(|&est| {
            let mine: Vec<&RepRow> = rows.iter().filter(|r| r.estimator == est).collect();
            let mut vals: Vec<f64> = mine.iter().filter(|r| !r.failed).map(|r| r.achieved_value).collect();
            vals.sort_by(f64::total_cmp);
            SummaryRow {
                method: method_name(est).into(),
                estimator: est,
                n_reps: mine.len(),
                n_failed: mine.iter().filter(|r| r.failed).count(),
                n_na_reps: mine.iter().filter(|r| r.na_evals > 0).count(),
                median: quantile_sorted(&vals, 0.5),
                q25: quantile_sorted(&vals, 0.25),
                q75: quantile_sorted(&vals, 0.75),
            }
        })
        .collect();
    let mut opt: Vec<f64> = Vec::new();
    let mut last_rep = None;
    for r in &rows {
        if last_rep != Some(r.rep) {
            opt.push(r.test_optimal);
            last_rep = Some(r.rep);
        }
    }
    let true_optimal_value = crate::numeric::mean(&opt);
    ResultTable {
        metadata: Metadata::new(config),
        rows,
        summary,
        true_optimal_value,
    }
}

/// Seeds for one repetition, each from its own stream.
fn rep_seed(seed: u64, tag: StreamTag, rep: usize) -> u64 {
    stream(seed, tag, rep as u64).next_u64()
}

enum Fitted {
    Ok {
        full: NuisanceFit,
        cross: Option<CrossFitNuisance>,
    },
    Failed(String),
}

fn run_rep(config: &ExperimentConfig, rep: usize, timing: bool) -> Result<Vec<RepRow>> {
    let mut train_rng = stream(config.seed, StreamTag::TrainData, rep as u64);
    let mut test_rng = stream(config.seed, StreamTag::TestData, rep as u64);
    let train = generate_with(config.scenario, config.n_train, &mut train_rng)?;
    let test = generate_with(config.scenario, config.n_test, &mut test_rng)?;
    let test_optimal = true_optimal_value(&test)?;

    let fitted = match fit_full(&train.data, &config.learner_pi, &config.learner_mu) {
        Err(e) => Fitted::Failed(format!("nuisance fit failed: {e}")),
        Ok(full) => {
            if config.methods.contains(&Estimator::CrossFit) {
                let fold_seed = rep_seed(config.seed, StreamTag::Folds, rep);
                match fit_crossfit(
                    &train.data,
                    config.folds,
                    fold_seed,
                    &config.learner_pi,
                    &config.learner_mu,
                ) {
                    Ok(cf) => Fitted::Ok { full, cross: Some(cf) },
                    Err(e) => Fitted::Failed(format!("cross-fit failed: {e}")),
                }
            } else {
                Fitted::Ok { full, cross: None }
            }
        }
    };

    let mut rows = Vec::with_capacity(config.methods.len());
    for (m, &est) in config.methods.iter().enumerate() {
        let mut row = RepRow {
            rep,
            method: method_name(est).into(),
            estimator: est,
            achieved_value: f64::NAN,
            failed: true,
            reason: None,
            na_evals: 0,
            converged: false,
            feasible: false,
            train_constraint: f64::NAN,
            train_estimate: f64::NAN,
            test_optimal,
            learn_seconds: None,
            beta: Vec::new(),
        };
        let (full, cross) = match &fitted {
            Fitted::Failed(reason) => {
                row.reason = Some(reason.clone());
                rows.push(row);
                continue;
            }
            Fitted::Ok { full, cross } => (full, cross.as_ref()),
        };
        let learn_seed = rep_seed(config.seed, StreamTag::Learn, rep * 64 + m);
        let problem = config.problem(est, learn_seed);
        let nuis = match (est, cross) {
            (Estimator::CrossFit, Some(cf)) => Nuisances::CrossFit(cf),
            _ => Nuisances::Full(full),
        };
        let start = Instant::now();
        let learned = learn_policy(&train.data, nuis, &problem);
        if timing {
            row.learn_seconds = Some(start.elapsed().as_secs_f64());
        }
        match learned {
            Err(e) => row.reason = Some(format!("learning failed: {e}")),
            Ok(res) => fill_row(&mut row, &res, &test, full, cross, config)?,
        }
        rows.push(row);
    }
    Ok(rows)
}

fn fill_row(
    row: &mut RepRow,
    res: &LearnResult,
    test: &PotentialDataset,
    full: &NuisanceFit,
    cross: Option<&CrossFitNuisance>,
    config: &ExperimentConfig,
) -> Result<()> {
    row.na_evals = res.na_evals;
    row.converged = res.converged;
    row.feasible = res.feasible;
    row.train_constraint = res.constraint_at_opt;
    row.train_estimate = res.value_at_opt.value;
    row.beta = res.beta_hat.clone();
    if !res.feasible {
        row.reason = res.reason.clone().or(Some("no admissible policy".into()));
        return Ok(());
    }
    let d = test_decisions(&res.policy, test, full, cross, row.estimator, config.test_propensity)?;
    row.achieved_value = true_value(test, &d)?;
    row.failed = false;
    Ok(())
}

/// Treatment probabilities of a learned policy on the test units.
pub fn test_decisions(
    policy: &Policy,
    test: &PotentialDataset,
    full: &NuisanceFit,
    cross: Option<&CrossFitNuisance>,
    est: Estimator,
    which: TestPropensity,
) -> Result<Vec<f64>> {
    let rows = test.data.unit_rows();
    match policy {
        Policy::Linear(p) => eval_linear(p, &rows),
        Policy::Ips(p) => {
            let pi = match (which, &test.true_pi) {
                (TestPropensity::True, Some(t)) => t.clone(),
                (TestPropensity::True, None) => {
                    return Err(Error::invalid("test data carry no true propensity"));
                }
                (TestPropensity::Fitted, _) => match (est, cross) {
                    (Estimator::CrossFit, Some(cf)) => cf.deployed_propensity(&rows),
                    _ => full.propensity_model().predict_rows(&rows),
                },
            };
            let delta = p.deltas(&p.feature_map.matrix(&rows)?)?;
            Ok(delta
                .iter()
                .zip(&pi)
                .map(|(&dl, &pr)| ips_prob_unchecked(dl, pr))
                .collect())
        }
    }
}

fn fmt_f64(v: f64) -> String {
    v.to_string()
}

/// Writes the per-repetition table, preceded by a `# metadata:` line.
pub fn write_rows_csv<W: std::io::Write>(table: &ResultTable, out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# metadata: {}", serde_json::to_string(&table.metadata)?).map_err(io_err)?;
    let timing = table.rows.iter().any(|r| r.learn_seconds.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "rep",
        "method",
        "estimator",
        "achieved_value",
        "failed",
        "na_evals",
        "converged",
        "feasible",
        "train_constraint",
        "train_estimate",
        "test_optimal",
        "reason",
    ];
    if timing {
        header.push("learn_seconds");
    }
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            r.rep.to_string(),
            r.method.clone(),
            r.estimator.tag().to_string(),
            fmt_f64(r.achieved_value),
            r.failed.to_string(),
            r.na_evals.to_string(),
            r.converged.to_string(),
            r.feasible.to_string(),
            fmt_f64(r.train_constraint),
            fmt_f64(r.train_estimate),
            fmt_f64(r.test_optimal),
            r.reason.clone().unwrap_or_default(),
        ];
        if timing {
            rec.push(r.learn_seconds.map(fmt_f64).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Writes the per-method summary plus an `optimal` reference row.
pub fn write_summary_csv<W: std::io::Write>(table: &ResultTable, out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# metadata: {}", serde_json::to_string(&table.metadata)?).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "estimator",
        "n_reps",
        "n_failed",
        "n_na_reps",
        "median",
        "q25",
        "q75",
    ])?;
    for s in &table.summary {
        w.write_record([
            s.method.clone(),
            s.estimator.tag().to_string(),
            s.n_reps.to_string(),
            s.n_failed.to_string(),
            s.n_na_reps.to_string(),
            fmt_f64(s.median),
            fmt_f64(s.q25),
            fmt_f64(s.q75),
        ])?;
    }
    let opt = fmt_f64(table.true_optimal_value);
    w.write_record(["optimal", "", "", "", "", opt.as_str(), "", ""])?;
    w.flush().map_err(io_err)?;
    Ok(())
}

fn io_err(source: std::io::Error) -> Error {
    Error::Io {
        path: "<output>".into(),
        source,
    }
}
