use ipslearn::experiment::{run_experiment, test_decisions, ExperimentConfig, Figure, RunOptions, TestPropensity};
use ipslearn::nuisance::LearnerSpec;
use ipslearn::numeric::{expit, mean};
use ipslearn::ope::Estimator;
use ipslearn::policy::{IncrementalPolicy, Policy};
use ipslearn::sim::{generate, true_nuisance, true_optimal_value, true_value, DgpSpec, PotentialDataset, Scenario};

fn draw(scenario: Scenario, n: usize, seed: u64) -> PotentialDataset {
    generate(&DgpSpec { scenario, n, seed }).unwrap()
}

fn column(pd: &PotentialDataset, j: usize) -> Vec<f64> {
    pd.data.x().iter().map(|r| r[j]).collect()
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Value of a deterministic rule under the potential outcomes.
fn rule_value(pd: &PotentialDataset, rule: impl Fn(&[f64]) -> bool) -> f64 {
    let rows = pd.data.unit_rows();
    let v: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| if rule(r) { pd.y1[i] } else { pd.y0[i] })
        .collect();
    mean(&v)
}

#[test]
fn fair_dp_sensitive_share_is_half() {
    let pd = draw(Scenario::FairDp, 100_000, 1);
    let s: Vec<f64> = pd.data.s().unwrap().iter().map(|&g| f64::from(g)).collect();
    assert!((mean(&s) - 0.5).abs() <= 0.01, "{}", mean(&s));
}

#[test]
fn fair_dp_propensities_stay_in_the_analytic_range() {
    let pd = draw(Scenario::FairDp, 100_000, 2);
    let pi = pd.true_pi.as_ref().unwrap();
    let lo = expit(-1.0 - 1.0 - 0.25 - 3.1);
    let hi = expit(-1.0 + 1.5);
    let min = pi.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min > 0.0 && min >= lo, "{min}");
    assert!(pi.iter().all(|&p| p > lo - 1e-12 && p < hi + 1e-12));
}

#[test]
fn sufficient_overlap_correlation() {
    let pd = draw(Scenario::SufficientOverlap, 100_000, 3);
    let r = correlation(&column(&pd, 2), &column(&pd, 3));
    assert!((r - 0.3).abs() <= 0.02, "{r}");
}

#[test]
fn optimal_value_uses_the_effect_sign() {
    let pd = draw(Scenario::FairDp, 100_000, 4);
    let oracle = rule_value(&pd, |r| 3.0 - 5.0 * r[1] + 2.0 * r[2] - 3.0 * r[3] + r[0] > 0.0);
    assert!((true_optimal_value(&pd).unwrap() - oracle).abs() < 1e-9);

    let pd = draw(Scenario::SufficientOverlap, 20_000, 5);
    let oracle = rule_value(&pd, |r| 3.0 - 5.0 * r[0] + 2.0 * r[1] - 3.0 * r[2] + r[3] > 0.0);
    assert!((true_optimal_value(&pd).unwrap() - oracle).abs() < 1e-9);
}

#[test]
fn no_effect_makes_every_rule_equal() {
    let mut pd = draw(Scenario::FairDp, 500, 6);
    pd.y1 = pd.y0.clone();
    assert!((true_optimal_value(&pd).unwrap() - mean(&pd.y0)).abs() < 1e-9);
}

#[test]
fn observational_policy_recovers_the_outcome_mean() {
    let test = draw(Scenario::FairDp, 100_000, 7);
    let zero = Policy::Ips(IncrementalPolicy::new(vec![0.0; 5]));
    let nuis = true_nuisance(Scenario::FairDp).unwrap();
    let d = test_decisions(&zero, &test, &nuis, None, Estimator::OneStep, TestPropensity::True).unwrap();
    assert_eq!(&d, test.true_pi.as_ref().unwrap());
    let fitted = test_decisions(&zero, &test, &nuis, None, Estimator::OneStep, TestPropensity::Fitted).unwrap();
    assert_eq!(fitted, d);
    let y = test.data.y();
    let sd = (y.iter().map(|v| (v - mean(y)).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let gap = (true_value(&test, &d).unwrap() - mean(y)).abs();
    assert!(gap <= 4.0 * sd / (y.len() as f64).sqrt(), "{gap}");
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        n_train: 200,
        n_test: 2000,
        reps: 2,
        methods: vec![Estimator::OrIps],
        learner_pi: LearnerSpec::logistic(),
        learner_mu: LearnerSpec::ridge(1.0),
        seed: 17,
        ..ExperimentConfig::preset(Figure::Fig1a)
    }
}

#[test]
fn experiment_table_shape() {
    let t = run_experiment(&small_config(), RunOptions::default()).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows.iter().map(|r| r.rep).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(t.summary.len(), 1);
    assert_eq!(t.summary[0].n_reps, 2);
    assert!(t.true_optimal_value.is_finite());
    assert!(t.rows.iter().all(|r| r.learn_seconds.is_none()));
}

#[test]
fn experiment_is_reproducible_across_thread_counts() {
    let mut cfg = small_config();
    cfg.methods = vec![Estimator::OneStep, Estimator::OrStd];
    let a = run_experiment(
        &cfg,
        RunOptions {
            threads: Some(1),
            timing: false,
        },
    )
    .unwrap();
    let b = run_experiment(
        &cfg,
        RunOptions {
            threads: Some(4),
            timing: false,
        },
    )
    .unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    cfg.seed += 1;
    let c = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
}

#[test]
fn experiment_validation() {
    let mut cfg = small_config();
    cfg.reps = 0;
    assert!(run_experiment(&cfg, RunOptions::default()).is_err());
    let mut cfg = small_config();
    cfg.scenario = Scenario::SemiSyntheticFormula;
    assert!(run_experiment(&cfg, RunOptions::default()).is_err());
    let mut cfg = small_config();
    cfg.methods.clear();
    assert!(run_experiment(&cfg, RunOptions::default()).is_err());
}
