//! Policy search: maximize an estimated value over a policy class, subject
//! to at most one constraint.
//!
//! Incremental (IPS) policies are smooth in `β` and go to the trust-region
//! solver, started from `β = 0` (the observational policy) and from a few
//! random points in the box. Deterministic linear rules give a piecewise
//! constant objective, so by default they go to the genetic search with
//! infeasible or failed candidates scored as `−∞`; the trust-region solver
//! can be selected for them instead.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintEvaluator, ConstraintSpec};
use crate::data::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::nuisance::{CrossFitNuisance, NuisanceFit, NuisancePredictions};
use crate::numeric::{stream, Rows, StreamTag};
use crate::ope::{estimate, Estimator, FoldWeighting, UnitData, ValueEstimate};
use crate::optim::{genetic_search, minimize, CobylaOptions, GeneticOptions, TracePoint};
use crate::policy::{
    deltas_into, ips_prob_unchecked, FeatureMap, IncrementalPolicy, LinearRulePolicy, Policy, DEFAULT_DELTA_CAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    Ips,
    Linear,
}

impl PolicyClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ips" => Ok(Self::Ips),
            "linear" => Ok(Self::Linear),
            other => Err(Error::invalid(format!("unknown policy class `{other}`"))),
        }
    }
}

/// Optimizer for the linear-rule class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSearch {
    /// Global genetic search with a death penalty.
    #[default]
    Genetic,
    /// The trust-region solver on the piecewise-constant objective, started
    /// from the treat-everyone rule and from random restarts.
    Cobyla,
}

fn default_restarts() -> usize {
    5
}

fn default_cap() -> f64 {
    DEFAULT_DELTA_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnProblem {
    pub value_estimator: Estimator,
    pub policy_class: PolicyClass,
    #[serde(default)]
    pub constraint: ConstraintSpec,
    #[serde(default)]
    pub feature_map: FeatureMap,
    /// Half-width of the coefficient box; defaults to 10 for the ips class
    /// and 1 for linear rules (whose coefficients are renormalized anyway).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Random restarts after the first start (not used by genetic search).
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_cap")]
    pub delta_cap: f64,
    #[serde(default)]
    pub fold_weighting: FoldWeighting,
    #[serde(default)]
    pub linear_search: LinearSearch,
    #[serde(default)]
    pub cobyla: CobylaOptions,
    #[serde(default)]
    pub genetic: GeneticOptions,
}

impl LearnProblem {
    pub fn new(value_estimator: Estimator, policy_class: PolicyClass) -> Self {
        Self {
            value_estimator,
            policy_class,
            constraint: ConstraintSpec::none(),
            feature_map: FeatureMap::default(),
            bound: None,
            seed: 0,
            restarts: default_restarts(),
            delta_cap: DEFAULT_DELTA_CAP,
            fold_weighting: FoldWeighting::Equal,
            linear_search: LinearSearch::Genetic,
            cobyla: CobylaOptions::default(),
            genetic: GeneticOptions::default(),
        }
    }

    pub fn with_constraint(mut self, constraint: ConstraintSpec) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn bound(&self) -> f64 {
        self.bound.unwrap_or(match self.policy_class {
            PolicyClass::Ips => 10.0,
            PolicyClass::Linear => 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.constraint.validate()?;
        let compatible = match self.policy_class {
            PolicyClass::Ips => self.value_estimator.is_incremental(),
            PolicyClass::Linear => !self.value_estimator.is_incremental(),
        };
        if !compatible {
            return Err(Error::invalid(format!(
                "estimator {} does not apply to the {:?} policy class",
                self.value_estimator, self.policy_class
            )));
        }
        let b = self.bound();
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::invalid(format!("coefficient bound {b} must be positive")));
        }
        if !(self.delta_cap > 0.0) || !self.delta_cap.is_finite() {
            return Err(Error::invalid("delta_cap must be positive"));
        }
        Ok(())
    }
}

/// Nuisances to learn with: one full-sample fit or a cross-fit.
#[derive(Debug, Clone, Copy)]
pub enum Nuisances<'a> {
    Full(&'a NuisanceFit),
    CrossFit(&'a CrossFitNuisance),
}

impl<'a> From<&'a NuisanceFit> for Nuisances<'a> {
    fn from(n: &'a NuisanceFit) -> Self {
        Nuisances::Full(n)
    }
}

impl<'a> From<&'a CrossFitNuisance> for Nuisances<'a> {
    fn from(n: &'a CrossFitNuisance) -> Self {
        Nuisances::CrossFit(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnTracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub index: usize,
    pub start: Vec<f64>,
    pub beta: Vec<f64>,
    pub value: f64,
    pub residual: f64,
    pub feasible: bool,
    pub converged: bool,
    pub n_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnResult {
    pub policy: Policy,
    pub beta_hat: Vec<f64>,
    pub value_at_opt: ValueEstimate,
    /// Constraint metric at the optimum (`Q̂_τ` for the quantile kind; 0
    /// when unconstrained).
    pub constraint_at_opt: f64,
    /// The same as a `g ≤ 0` residual.
    pub constraint_residual: f64,
    pub n_evals: usize,
    /// Candidates whose estimator reported failure.
    pub na_evals: usize,
    pub converged: bool,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restarts: Vec<RestartOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<LearnTracePoint>,
}

/// Feasibility slack for the trust-region path.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Everything an objective evaluation needs, computed once per problem.
struct Prepared<'a> {
    ds: &'a Dataset,
    preds: NuisancePredictions,
    features: Rows,
    folds: Option<&'a FoldAssignment>,
    constraint: ConstraintEvaluator<'a>,
}

impl<'a> Prepared<'a> {
    fn new(ds: &'a Dataset, nuis: Nuisances<'a>, problem: &LearnProblem) -> Result<Self> {
        let rows = ds.unit_rows();
        let (preds, folds) = match nuis {
            Nuisances::Full(f) => (f.predict(&rows)?, None),
            Nuisances::CrossFit(c) => (c.predict(ds)?, Some(&c.folds)),
        };
        if problem.value_estimator == Estimator::CrossFit && folds.is_none() {
            return Err(Error::invalid("CROSS_FIT learning needs cross-fitted nuisances"));
        }
        let features = problem.feature_map.matrix(&rows)?;
        let constraint = ConstraintEvaluator::new(problem.constraint, ds)?;
        Ok(Self {
            ds,
            preds,
            features,
            folds,
            constraint,
        })
    }

    fn units(&self) -> UnitData<'_> {
        UnitData {
            a: self.ds.a(),
            y: self.ds.y(),
            nuis: &self.preds,
        }
    }

    fn value(&self, problem: &LearnProblem, input: &[f64]) -> Result<ValueEstimate> {
        estimate(
            problem.value_estimator,
            &self.units(),
            input,
            self.folds,
            problem.fold_weighting,
        )
    }

    /// `(δ, d)` for an ips coefficient vector.
    fn ips_inputs(&self, beta: &[f64], cap: f64) -> (Vec<f64>, Vec<f64>) {
        let mut delta = vec![0.0; self.features.len()];
        deltas_into(beta, &self.features, cap, &mut delta);
        let d = delta
            .iter()
            .zip(&self.preds.pi)
            .map(|(&dl, &pi)| ips_prob_unchecked(dl, pi))
            .collect();
        (delta, d)
    }

    fn linear_decisions(&self, beta: &[f64]) -> Vec<f64> {
        self.features
            .iter()
            .map(|r| {
                let s: f64 = r.iter().zip(beta).map(|(x, b)| x * b).sum();
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn residual(&self, d: &[f64]) -> f64 {
        self.constraint.residual(d).unwrap_or(f64::INFINITY)
    }
}

/// Learns a policy on `ds` under `problem`.
pub fn learn_policy<'a>(
    ds: &'a Dataset,
    nuis: impl Into<Nuisances<'a>>,
    problem: &LearnProblem,
) -> Result<LearnResult> {
    problem.validate()?;
    let prep = Prepared::new(ds, nuis.into(), problem)?;
    match problem.policy_class {
        PolicyClass::Ips => learn_ips(&prep, problem),
        PolicyClass::Linear => match problem.linear_search {
            LinearSearch::Genetic => learn_linear(&prep, problem),
            LinearSearch::Cobyla => learn_linear_cobyla(&prep, problem),
        },
    }
}

fn learn_ips(prep: &Prepared, problem: &LearnProblem) -> Result<LearnResult> {
    let q = prep.features.width();
    let bound = problem.bound();
    let constrained = problem.constraint.is_active();
    let opts = CobylaOptions {
        lower: Some(vec![-bound; q]),
        upper: Some(vec![bound; q]),
        ..problem.cobyla.clone()
    };

    // Structural errors (e.g. an empty treated group under EO) surface here
    // instead of being silently treated as infeasibility.
    let (_, d0) = prep.ips_inputs(&vec![0.0; q], problem.delta_cap);
    prep.constraint.residual(&d0)?;

    let runs = multi_start(problem, vec![0.0; q], &opts, |beta, c| {
        let (delta, d) = prep.ips_inputs(beta, problem.delta_cap);
        if constrained {
            c[0] = prep.residual(&d);
        }
        match prep.value(problem, &delta) {
            Ok(v) if !v.failed => -v.value,
            _ => f64::NAN,
        }
    });
    let n_evals = runs.iter().map(|(o, _)| o.n_evals).sum();
    let (chosen, trace) = pick_restart(&runs);

    let policy = IncrementalPolicy {
        beta: chosen.beta.clone(),
        feature_map: problem.feature_map.clone(),
        delta_cap: problem.delta_cap,
    };
    let (delta, d) = prep.ips_inputs(&policy.beta, problem.delta_cap);
    let value_at_opt = prep.value(problem, &delta)?;
    let metric = prep.constraint.metric(&d)?;
    let residual = prep.constraint.residual(&d)?;
    let feasible = chosen.feasible;
    let reason = if !feasible {
        Some("no restart reached a feasible point".to_string())
    } else if !chosen.converged {
        Some("evaluation budget exhausted before the trust region shrank to rho_end".to_string())
    } else {
        None
    };
    Ok(LearnResult {
        beta_hat: policy.beta.clone(),
        policy: Policy::Ips(policy),
        value_at_opt,
        constraint_at_opt: metric,
        constraint_residual: residual,
        n_evals,
        na_evals: 0,
        converged: chosen.converged && feasible,
        feasible,
        reason,
        restarts: runs.iter().map(|(o, _)| o.clone()).collect(),
        trace: trace_of(trace),
    })
}

type Run = (RestartOutcome, Vec<TracePoint>);

/// Runs the trust-region solver from `first` and from `problem.restarts`
/// uniform draws in the box, in parallel; output is in start order.
fn multi_start<F>(problem: &LearnProblem, first: Vec<f64>, opts: &CobylaOptions, eval: F) -> Vec<Run>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    let q = first.len();
    let bound = problem.bound();
    let m = usize::from(problem.constraint.is_active());
    let mut starts = vec![first];
    for r in 0..problem.restarts {
        let mut rng = stream(problem.seed, StreamTag::Restarts, r as u64);
        starts.push((0..q).map(|_| rng.random_range(-bound..=bound)).collect());
    }
    starts
        .par_iter()
        .enumerate()
        .map(|(index, start)| {
            let res = minimize(&eval, m, start, opts);
            let outcome = RestartOutcome {
                index,
                start: start.clone(),
                beta: res.x.clone(),
                value: -res.f,
                residual: res.constraints.first().copied().unwrap_or(0.0),
                feasible: res.feasible,
                converged: res.converged,
                n_evals: res.n_evals,
            };
            (outcome, res.trace)
        })
        .collect()
}

/// Best feasible restart by value, earliest on ties; otherwise the least
/// violating one.
fn pick_restart(runs: &[Run]) -> &Run {
    runs.iter()
        .filter(|(o, _)| o.feasible)
        .min_by(|(a, _), (b, _)| b.value.total_cmp(&a.value).then(a.index.cmp(&b.index)))
        .or_else(|| {
            runs.iter().min_by(|(a, _), (b, _)| {
                a.residual
                    .max(0.0)
                    .total_cmp(&b.residual.max(0.0))
                    .then(a.index.cmp(&b.index))
            })
        })
        .expect("at least one start")
}

fn trace_of(trace: &[TracePoint]) -> Vec<LearnTracePoint> {
    trace
        .iter()
        .map(|t| LearnTracePoint {
            iteration: t.eval,
            objective: -t.objective,
            violation: t.violation,
        })
        .collect()
}

fn learn_linear_cobyla(prep: &Prepared, problem: &LearnProblem) -> Result<LearnResult> {
    let q = prep.features.width();
    let bound = problem.bound();
    let constrained = problem.constraint.is_active();
    let opts = CobylaOptions {
        lower: Some(vec![-bound; q]),
        upper: Some(vec![bound; q]),
        ..problem.cobyla.clone()
    };
    let na = AtomicUsize::new(0);
    let mut treat_all = vec![0.0; q];
    treat_all[0] = bound;
    let runs = multi_start(problem, treat_all, &opts, |beta, c| {
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            if constrained {
                c[0] = f64::NAN;
            }
            return f64::NAN;
        }
        let unit: Vec<f64> = beta.iter().map(|b| b / norm).collect();
        let d = prep.linear_decisions(&unit);
        if constrained {
            c[0] = prep.residual(&d);
        }
        match prep.value(problem, &d) {
            Ok(v) if !v.failed && v.value.is_finite() => -v.value,
            _ => {
                na.fetch_add(1, Ordering::Relaxed);
                f64::NAN
            }
        }
    });
    let n_evals = runs.iter().map(|(o, _)| o.n_evals).sum();
    let na_evals = na.load(Ordering::Relaxed);
    let (chosen, trace) = pick_restart(&runs);
    // A NaN objective is stored as a huge finite number by the solver.
    let admissible = chosen.feasible && chosen.value > -1e100;
    let policy = LinearRulePolicy::new(chosen.beta.clone(), problem.feature_map.clone())?;
    let d = prep.linear_decisions(policy.beta());
    let value_at_opt = prep.value(problem, &d)?;
    let metric = prep.constraint.metric(&d)?;
    let residual = prep.constraint.residual(&d)?;
    Ok(LearnResult {
        beta_hat: policy.beta().to_vec(),
        policy: Policy::Linear(policy),
        value_at_opt,
        constraint_at_opt: metric,
        constraint_residual: residual,
        n_evals,
        na_evals,
        converged: admissible,
        feasible: admissible && residual <= 0.0,
        reason: (!admissible).then(|| "no restart reached an admissible rule".to_string()),
        restarts: runs.iter().map(|(o, _)| o.clone()).collect(),
        trace: trace_of(trace),
    })
}

fn learn_linear(prep: &Prepared, problem: &LearnProblem) -> Result<LearnResult> {
    let q = prep.features.width();
    let bound = problem.bound();
    let na = AtomicUsize::new(0);
    let objective = |beta: &[f64]| -> f64 {
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return f64::INFINITY;
        }
        let unit: Vec<f64> = beta.iter().map(|b| b / norm).collect();
        let d = prep.linear_decisions(&unit);
        if prep.residual(&d) > 0.0 {
            return f64::INFINITY;
        }
        match prep.value(problem, &d) {
            Ok(v) if !v.failed && v.value.is_finite() => -v.value,
            _ => {
                na.fetch_add(1, Ordering::Relaxed);
                f64::INFINITY
            }
        }
    };
    let mut rng = stream(problem.seed, StreamTag::Genetic, 0);
    let ga = genetic_search(objective, &vec![-bound; q], &vec![bound; q], &problem.genetic, &mut rng);
    let na_evals = na.load(Ordering::Relaxed);
    let found = ga.f.is_finite();

    let beta = if found {
        ga.x.clone()
    } else {
        // Nothing admissible: report the plain treat-all rule's direction.
        let mut b = vec![0.0; q];
        b[0] = 1.0;
        b
    };
    let policy = LinearRulePolicy::new(beta, problem.feature_map.clone())?;
    let d = prep.linear_decisions(policy.beta());
    let value_at_opt = prep.value(problem, &d)?;
    let metric = prep.constraint.metric(&d)?;
    let residual = prep.constraint.residual(&d)?;
    let trace = ga
        .history
        .iter()
        .enumerate()
        .filter(|(_, f)| f.is_finite())
        .map(|(i, f)| LearnTracePoint {
            iteration: i,
            objective: -f,
            violation: 0.0,
        })
        .collect();
    Ok(LearnResult {
        beta_hat: policy.beta().to_vec(),
        policy: Policy::Linear(policy),
        value_at_opt,
        constraint_at_opt: metric,
        constraint_residual: residual,
        n_evals: ga.n_evals,
        na_evals,
        converged: found,
        feasible: found && residual <= 0.0,
        reason: (!found).then(|| "every candidate was infeasible or returned NA".to_string()),
        restarts: Vec::new(),
        trace,
    })
}
