//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit
//! if any criterion failed. Run with
//! `cargo test -p ipslearn-cli --test acceptance --release`.

use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ipslearn::constraints::{weighted_quantile, ConstraintSpec};
use ipslearn::data::{make_folds, Dataset};
use ipslearn::experiment::{run_experiment, ExperimentConfig, Figure, RepRow, RunOptions};
use ipslearn::learn::{learn_policy, LearnProblem, LearnResult, PolicyClass};
use ipslearn::nuisance::{fit_full, CrossFitNuisance, FnPredictor, NuisanceFit};
use ipslearn::numeric::{expit, stream, NeumaierSum, StreamTag};
use ipslearn::ope::{value_cross_fit, value_ipw_ips, value_one_step, value_or_ips, Estimator, FoldWeighting};
use ipslearn::optim::{cobyla_solve, genetic_search, CobylaOptions, ConstraintFn, GeneticOptions};
use ipslearn::policy::{eval_incremental, ips_prob, IncrementalPolicy};
use ipslearn::sim::{generate_with, parametric_specs, true_nuisance, true_value, PotentialDataset, Scenario};
use rand::{Rng, RngCore};
use rayon::prelude::*;

const SEED: u64 = 20_240_901;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    ipslearn::numeric::quantile_sorted(&s, 0.5)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().copied().collect::<NeumaierSum>().value() / v.len() as f64
}

fn fair_dp(n: usize, tag: StreamTag, index: u64) -> PotentialDataset {
    let mut rng = stream(SEED, tag, index);
    generate_with(Scenario::FairDp, n, &mut rng).expect("generate")
}

/// Pseudo-random but deterministic function of a row and a key.
fn garbage(row: &[f64], key: u64) -> f64 {
    let mut h = key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in row {
        h ^= v.to_bits();
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(31);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn garbage_fit(key: u64) -> NuisanceFit {
    NuisanceFit::from_predictors(
        Arc::new(FnPredictor::new("g_pi", move |r: &[f64]| 0.01 + 0.98 * garbage(r, key))),
        Arc::new(FnPredictor::new("g_mu0", move |r: &[f64]| {
            200.0 * garbage(r, key + 1) - 100.0
        })),
        Arc::new(FnPredictor::new("g_mu1", move |r: &[f64]| {
            200.0 * garbage(r, key + 2) - 100.0
        })),
    )
}

fn c1_delta_one_collapse() -> Outcome {
    let mut worst: f64 = 0.0;
    for rep in 0..20u64 {
        let mut rng = stream(SEED, StreamTag::Generate, 1000 + rep);
        let n = 100;
        let rows: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..150.0)).collect();
        let ds = Dataset::new(ipslearn::numeric::Rows::new(rows, 3), a, y.clone(), None, None).unwrap();
        let fit = garbage_fit(rng.next_u64());
        let policy = IncrementalPolicy::new(vec![0.0; 4]);
        let folds = make_folds(n, 5, rep).unwrap();
        let cfn = CrossFitNuisance::from_parts(folds, (0..5).map(|k| garbage_fit(rep * 10 + k)).collect()).unwrap();
        let ybar = mean(&y);
        for v in [
            value_ipw_ips(&ds, &policy, &fit).unwrap().value,
            value_one_step(&ds, &policy, &fit).unwrap().value,
            value_cross_fit(&ds, &policy, &cfn, FoldWeighting::Equal).unwrap().value,
        ] {
            worst = worst.max(((v - ybar) / ybar).abs());
        }
    }
    verdict(worst <= 1e-10, format!("max relative error {worst:.2e} (limit 1e-10)"))
}

fn c2_oracle_agreement() -> Outcome {
    let pd = fair_dp(100_000, StreamTag::TestData, 2);
    let truth_fit = true_nuisance(Scenario::FairDp).unwrap();
    let folds = make_folds(pd.n(), 5, 2).unwrap();
    let cfn = CrossFitNuisance::from_parts(folds, vec![truth_fit.clone(); 5]).unwrap();
    let mut rng = stream(SEED, StreamTag::Learn, 2);
    let rows = pd.data.unit_rows();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let beta: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let policy = IncrementalPolicy::new(beta);
        let d = eval_incremental(&policy, &truth_fit, &rows).unwrap();
        let truth = true_value(&pd, &d).unwrap();
        let os = value_one_step(&pd.data, &policy, &truth_fit).unwrap();
        let se = os.std_error.unwrap();
        for v in [
            value_or_ips(&pd.data, &policy, &truth_fit).unwrap().value,
            value_ipw_ips(&pd.data, &policy, &truth_fit).unwrap().value,
            os.value,
            value_cross_fit(&pd.data, &policy, &cfn, FoldWeighting::Equal)
                .unwrap()
                .value,
        ] {
            worst = worst.max((v - truth).abs() / se);
        }
    }
    verdict(
        worst <= 3.0,
        format!("max |estimate - truth| = {worst:.2} one-step SEs (limit 3)"),
    )
}

/// `E[Y]` under fair_dp from the true conditional means over 10⁷ draws.
fn observational_truth() -> f64 {
    let truth = true_nuisance(Scenario::FairDp).unwrap();
    let parts: Vec<NeumaierSum> = (0..10u64)
        .into_par_iter()
        .map(|k| {
            let pd = fair_dp(1_000_000, StreamTag::Split, k);
            pd.data
                .unit_rows()
                .iter()
                .map(|r| {
                    let p = truth.propensity(r);
                    p * truth.outcome1(r) + (1.0 - p) * truth.outcome0(r)
                })
                .collect()
        })
        .collect();
    NeumaierSum::merge_all(&parts) / 1e7
}

fn c3_ci_coverage() -> Outcome {
    let truth = observational_truth();
    let (spec_pi, spec_mu) = parametric_specs(Scenario::FairDp).unwrap();
    let policy = IncrementalPolicy::new(vec![0.0; 5]);
    let covered: usize = (0..500u64)
        .into_par_iter()
        .map(|rep| {
            let pd = fair_dp(1000, StreamTag::TrainData, 3_000 + rep);
            let fit = fit_full(&pd.data, &spec_pi, &spec_mu).unwrap();
            let v = value_one_step(&pd.data, &policy, &fit).unwrap();
            usize::from(v.ci_low.unwrap() <= truth && truth <= v.ci_high.unwrap())
        })
        .sum();
    let rate = covered as f64 / 500.0;
    verdict(
        (0.93..=0.97).contains(&rate),
        format!(
            "coverage {:.1}% of 500 reps (truth {truth:.3}; band 93%-97%)",
            100.0 * rate
        ),
    )
}

/// True nuisances with `μ̂ₐ = μₐ + 20 ε h` and `logit π̂ = logit π + ε h`,
/// `h(x) = 1 + x1 + x2 + x3`.
fn perturbed(eps: f64) -> NuisanceFit {
    let t = Arc::new(true_nuisance(Scenario::FairDp).unwrap());
    let h = |r: &[f64]| 1.0 + r[1] + r[2] + r[3];
    let (t0, t1, t2) = (t.clone(), t.clone(), t);
    NuisanceFit::from_predictors(
        Arc::new(FnPredictor::new("pert_pi", move |r: &[f64]| {
            let p = t0.propensity(r);
            expit((p / (1.0 - p)).ln() + eps * h(r))
        })),
        Arc::new(FnPredictor::new("pert_mu0", move |r: &[f64]| {
            t1.outcome0(r) + 20.0 * eps * h(r)
        })),
        Arc::new(FnPredictor::new("pert_mu1", move |r: &[f64]| {
            t2.outcome1(r) + 20.0 * eps * h(r)
        })),
    )
}

fn c4_second_order_bias() -> Outcome {
    let truth = true_nuisance(Scenario::FairDp).unwrap();
    let fits = [perturbed(0.1), perturbed(0.2)];
    let policy = IncrementalPolicy::new(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    // Bias against the sample's own conditional estimand; same draws for both ε.
    let per_rep: Vec<[f64; 4]> = (0..200u64)
        .into_par_iter()
        .map(|rep| {
            let pd = fair_dp(10_000, StreamTag::TrainData, 10_000 + rep);
            let rows = pd.data.unit_rows();
            let target = mean(
                &rows
                    .iter()
                    .map(|r| {
                        let q = ips_prob(1f64.exp(), truth.propensity(r)).unwrap();
                        q * truth.outcome1(r) + (1.0 - q) * truth.outcome0(r)
                    })
                    .collect::<Vec<_>>(),
            );
            let mut out = [0.0; 4];
            for (j, fit) in fits.iter().enumerate() {
                out[j] = value_one_step(&pd.data, &policy, fit).unwrap().value - target;
                out[2 + j] = value_or_ips(&pd.data, &policy, fit).unwrap().value - target;
            }
            out
        })
        .collect();
    let col = |j: usize| mean(&per_rep.iter().map(|r| r[j]).collect::<Vec<_>>());
    let (os1, os2, or1, or2) = (col(0), col(1), col(2), col(3));
    let r_os = os2.abs() / os1.abs();
    let r_or = or2.abs() / or1.abs();
    verdict(
        (3.0..=5.0).contains(&r_os) && (1.6..=2.4).contains(&r_or),
        format!(
            "one-step bias {os1:.4} -> {os2:.4} (ratio {r_os:.2}, band [3,5]); OR-IPS bias {or1:.4} -> {or2:.4} (ratio {r_or:.2}, band [1.6,2.4])"
        ),
    )
}

fn c5_figure_ordering() -> (Outcome, Vec<RepRow>) {
    let mut config = ExperimentConfig::preset(Figure::Fig1a);
    config.reps = 50;
    config.n_test = 20_000;
    config.seed = SEED;
    let start = Instant::now();
    let table = run_experiment(&config, RunOptions::default()).expect("experiment");
    let elapsed = start.elapsed();
    let med = |est: Estimator| {
        let v: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| r.estimator == est && !r.failed)
            .map(|r| r.achieved_value)
            .collect();
        if v.is_empty() {
            f64::NEG_INFINITY
        } else {
            median(&v)
        }
    };
    let baselines = [Estimator::IpwStd, Estimator::OrStd, Estimator::AipwStd].map(med);
    let best_baseline = baselines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (os, or) = (med(Estimator::OneStep), med(Estimator::OrIps));
    let na_events = table
        .rows
        .iter()
        .filter(|r| matches!(r.estimator, Estimator::IpwStd | Estimator::AipwStd) && (r.na_evals > 0 || r.failed))
        .count();
    let ordering = os > best_baseline && or > best_baseline;
    let pass = ordering && na_events > 0 && within(elapsed, 1800.0);
    let detail = format!(
        "medians IPW {:.2} OR {:.2} AIPW {:.2} | IPW-IPS {:.2} OR-IPS {or:.2} One-step {os:.2} | optimum {:.2}; ordering {}; IPW/AIPW NA runs {na_events}; {:.0}s",
        baselines[0],
        baselines[1],
        baselines[2],
        med(Estimator::IpwIps),
        table.true_optimal_value,
        if ordering { "holds" } else { "fails" },
        elapsed.as_secs_f64()
    );
    (verdict(pass, detail), table.rows)
}

fn c6_quantile_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(SEED, StreamTag::Generate, 6);
    let taus = [0.1, 0.25, 0.5, 0.9];
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(1..=50usize);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let tau = taus[inst % 4];
        let q = weighted_quantile(&y, &c, tau).unwrap();
        let loss = |t: f64| -> f64 {
            y.iter()
                .zip(&c)
                .map(|(&yi, &ci)| {
                    let u = yi - t;
                    ci * u * (tau - f64::from(u8::from(u < 0.0)))
                })
                .sum()
        };
        let (mut best_t, mut best_l) = (f64::NAN, f64::INFINITY);
        let steps = 10_000;
        for k in 0..=steps {
            let t = -5.0 + 10.0 * k as f64 / steps as f64;
            let l = loss(t);
            if l < best_l {
                best_l = l;
                best_t = t;
            }
        }
        worst = worst.max((q - best_t).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-3 && within(elapsed, 5.0),
        format!(
            "max |q - grid argmin| {worst:.2e} (limit 1e-3); {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64
        + x.iter()
            .map(|v| v * v - 10.0 * (2.0 * std::f64::consts::PI * v).cos())
            .sum::<f64>()
}

type Constraints = Vec<ConstraintFn<'static>>;
type Problem = (
    &'static str,
    ConstraintFn<'static>,
    Constraints,
    CobylaOptions,
    Vec<f64>,
    Vec<f64>,
);

fn c7_optimizers() -> Outcome {
    let start = Instant::now();
    let quad = |x: &[f64]| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2);
    let problems: Vec<Problem> = vec![
        (
            "quadratic, half-plane",
            Box::new(quad),
            vec![Box::new(|x: &[f64]| x[0] + x[1] - 2.0)],
            CobylaOptions::default(),
            vec![0.0, 0.0],
            vec![0.5, 1.5],
        ),
        (
            "quadratic, disc",
            Box::new(|x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] - 2.0).powi(2)),
            vec![Box::new(|x: &[f64]| x[0] * x[0] + x[1] * x[1] - 2.0)],
            CobylaOptions::default(),
            vec![0.0, 0.0],
            vec![1.0, 1.0],
        ),
        (
            "linear program corner",
            Box::new(|x: &[f64]| -x[0] - x[1]),
            vec![
                Box::new(|x: &[f64]| x[0] + 2.0 * x[1] - 4.0),
                Box::new(|x: &[f64]| 3.0 * x[0] + x[1] - 6.0),
                Box::new(|x: &[f64]| -x[0]),
                Box::new(|x: &[f64]| -x[1]),
            ],
            CobylaOptions::default(),
            vec![0.0, 0.0],
            vec![1.6, 1.2],
        ),
        (
            "active box bound",
            Box::new(|x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2)),
            vec![],
            CobylaOptions::default().with_box(vec![-2.0, -2.0], vec![2.0, 2.0]),
            vec![0.0, 0.0],
            vec![2.0, -1.0],
        ),
        (
            "quadratic, infeasible start",
            Box::new(|x: &[f64]| x[0] * x[0] + x[1] * x[1]),
            vec![Box::new(|x: &[f64]| 3.0 - x[0])],
            CobylaOptions::default(),
            vec![0.0, 1.0],
            vec![3.0, 0.0],
        ),
    ];
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, f, cons, opts, x0, target) in problems {
        let r = cobyla_solve(f, cons, &x0, &opts);
        let err = r.x.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        if !(r.feasible && err <= 1e-4) {
            failures.push(name);
        }
    }
    let opts = GeneticOptions {
        polish: true,
        ..GeneticOptions::default()
    };
    let hits = (0..20u64)
        .filter(|&seed| {
            let mut rng = stream(seed, StreamTag::Genetic, 0);
            genetic_search(rastrigin, &[-5.12; 2], &[5.12; 2], &opts, &mut rng).f <= 0.5
        })
        .count();
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && hits >= 18 && within(elapsed, 60.0),
        format!(
            "COBYLA max error {worst:.1e} on 5 problems (limit 1e-4){}; Rastrigin hits {hits}/20 (need 18); {:.2}s",
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failures.join(", "))
            },
            elapsed.as_secs_f64()
        ),
    )
}

/// Value of an IPS rule on `test` computed from the true conditional means.
fn conditional_value(test: &PotentialDataset, truth: &NuisanceFit, beta: &[f64], pi_of: &dyn Fn(&[f64]) -> f64) -> f64 {
    let policy = IncrementalPolicy::new(beta.to_vec());
    let rows = test.data.unit_rows();
    let delta = policy.deltas(&policy.feature_map.matrix(&rows).unwrap()).unwrap();
    let vals: Vec<f64> = rows
        .iter()
        .zip(&delta)
        .map(|(r, &dl)| {
            let q = ips_prob(dl, pi_of(r)).unwrap();
            q * truth.outcome1(r) + (1.0 - q) * truth.outcome0(r)
        })
        .collect();
    mean(&vals)
}

fn c8_regret_decay() -> (Outcome, Vec<LearnResult>) {
    let start = Instant::now();
    let truth = true_nuisance(Scenario::FairDp).unwrap();
    let test = fair_dp(100_000, StreamTag::TestData, 8);
    // In-class optimum: the same learner driven by the true nuisances on the
    // large test sample.
    let oracle = learn_policy(
        &test.data,
        &truth,
        &LearnProblem::new(Estimator::OrIps, PolicyClass::Ips).with_seed(SEED),
    )
    .unwrap();
    let v_star = conditional_value(&test, &truth, &oracle.beta_hat, &|r| truth.propensity(r));
    let (spec_pi, spec_mu) = parametric_specs(Scenario::FairDp).unwrap();
    let mut runs = Vec::new();
    let mut means = Vec::new();
    for (k, &n) in [250usize, 1000, 4000].iter().enumerate() {
        let res: Vec<(f64, LearnResult)> = (0..50u64)
            .into_par_iter()
            .map(|rep| {
                let pd = fair_dp(n, StreamTag::TrainData, 100_000 * (k as u64 + 1) + rep);
                let fit = fit_full(&pd.data, &spec_pi, &spec_mu).unwrap();
                let problem = LearnProblem::new(Estimator::OneStep, PolicyClass::Ips).with_seed(rep);
                let r = learn_policy(&pd.data, &fit, &problem).unwrap();
                let v = conditional_value(&test, &truth, &r.beta_hat, &|row| fit.propensity(row));
                (v_star - v, r)
            })
            .collect();
        means.push(mean(&res.iter().map(|(g, _)| *g).collect::<Vec<_>>()));
        runs.extend(res.into_iter().map(|(_, r)| r));
    }
    let elapsed = start.elapsed();
    let monotone = means[0] > means[1] && means[1] > means[2];
    let ratio = means[2] / means[0];
    let pass = monotone && ratio <= 0.6 && within(elapsed, 1800.0);
    (
        verdict(
            pass,
            format!(
                "mean regret n=250 {:.3}, n=1000 {:.3}, n=4000 {:.3} (V* {v_star:.3}); ratio {ratio:.3} (limit 0.6); {:.0}s",
                means[0],
                means[1],
                means[2],
                elapsed.as_secs_f64()
            ),
        ),
        runs,
    )
}

/// Budget runs on the criterion-8 datasets, so the budget half of the
/// feasibility check is not vacuous.
fn budget_runs() -> Vec<(f64, LearnResult)> {
    let (spec_pi, spec_mu) = parametric_specs(Scenario::FairDp).unwrap();
    [0.0, 0.2, 0.4]
        .into_par_iter()
        .flat_map(|b: f64| {
            let (spec_pi, spec_mu) = (spec_pi.clone(), spec_mu.clone());
            (0..5u64).into_par_iter().map(move |rep| {
                let pd = fair_dp(1000, StreamTag::TrainData, 200_000 + rep);
                let fit = fit_full(&pd.data, &spec_pi, &spec_mu).unwrap();
                let problem = LearnProblem::new(Estimator::OneStep, PolicyClass::Ips)
                    .with_constraint(ConstraintSpec::budget(b))
                    .with_seed(rep);
                (b, learn_policy(&pd.data, &fit, &problem).unwrap())
            })
        })
        .collect()
}

fn c9_feasibility(c5_rows: &[RepRow], c8_runs: &[LearnResult]) -> Outcome {
    let dp_runs: Vec<&RepRow> = c5_rows.iter().filter(|r| r.converged && !r.failed).collect();
    let dp_bad = dp_runs.iter().filter(|r| r.train_constraint > 0.01 + 1e-3).count();
    let c8_bad = c8_runs
        .iter()
        .filter(|r| r.converged && r.constraint_residual > 0.0)
        .count();
    let budget = budget_runs();
    let budget_conv: Vec<_> = budget.iter().filter(|(_, r)| r.converged).collect();
    let budget_bad = budget_conv
        .iter()
        .filter(|(b, r)| r.constraint_at_opt > b + 1e-6)
        .count();
    verdict(
        dp_bad == 0 && c8_bad == 0 && budget_bad == 0,
        format!(
            "fair-DP: {dp_bad} of {} converged runs above 0.011; criterion-8 runs are unconstrained ({c8_bad} violations); budget: {budget_bad} of {} converged runs above b + 1e-6",
            dp_runs.len(),
            budget_conv.len()
        ),
    )
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: usize, tag: &str| -> (Vec<u8>, Vec<u8>) {
        let out = dir.path().join(format!("t{threads}_{tag}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_ipslearn"))
            .args([
                "replicate",
                "--figure",
                "fig1a",
                "--reps",
                "3",
                "--seed",
                "42",
                "--threads",
            ])
            .arg(threads.to_string())
            .arg("--out")
            .arg(&out)
            .env_remove("IPSLEARN_SEED")
            .status()
            .unwrap();
        assert!(status.success());
        let summary = out.with_file_name(format!("t{threads}_{tag}.summary.csv"));
        (std::fs::read(&out).unwrap(), std::fs::read(summary).unwrap())
    };
    let reference = run(1, "a");
    let others = [run(1, "b"), run(8, "a"), run(8, "b")];
    let same = others.iter().all(|o| *o == reference);
    verdict(
        same,
        format!(
            "4 runs (threads 1 and 8, twice each): tables {}",
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, o: Outcome| {
        println!(
            "criterion {id:>2} [{}] {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, o));
    };
    let t = Instant::now();
    let o = c1_delta_one_collapse();
    let elapsed = t.elapsed();
    report(
        1,
        verdict(
            o.pass && within(elapsed, 1.0),
            format!("{}; {:.2}s", o.detail, elapsed.as_secs_f64()),
        ),
    );
    let t = Instant::now();
    let o = c2_oracle_agreement();
    let elapsed = t.elapsed();
    report(
        2,
        verdict(
            o.pass && within(elapsed, 120.0),
            format!("{}; {:.1}s", o.detail, elapsed.as_secs_f64()),
        ),
    );
    let t = Instant::now();
    let o = c3_ci_coverage();
    let elapsed = t.elapsed();
    report(
        3,
        verdict(
            o.pass && within(elapsed, 600.0),
            format!("{}; {:.1}s", o.detail, elapsed.as_secs_f64()),
        ),
    );
    let t = Instant::now();
    let o = c4_second_order_bias();
    let elapsed = t.elapsed();
    report(
        4,
        verdict(
            o.pass && within(elapsed, 600.0),
            format!("{}; {:.1}s", o.detail, elapsed.as_secs_f64()),
        ),
    );
    let (o5, c5_rows) = c5_figure_ordering();
    report(5, o5);
    report(6, c6_quantile_oracle());
    report(7, c7_optimizers());
    let (o8, c8_runs) = c8_regret_decay();
    report(8, o8);
    report(9, c9_feasibility(&c5_rows, &c8_runs));
    report(10, c10_determinism());

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
