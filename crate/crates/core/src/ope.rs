//! Off-policy value estimation.
//!
//! For incremental policies: the outcome-regression plug-in (OR-IPS), the
//! weighting estimator (IPW-IPS), the one-step estimator built on the
//! uncentered efficient influence function, and its cross-fitted version.
//! None of these divide by a propensity: every denominator is
//! `δπ + 1 − π ≥ min(δ, 1) > 0`.
//!
//! For deterministic rules: the standard OR, IPW and AIPW estimators, which
//! report failure when a unit that follows the rule has estimated
//! probability zero of doing so.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::nuisance::{CrossFitNuisance, NuisanceFit, NuisancePredictions};
use crate::numeric::{NeumaierSum, Z95};
use crate::policy::{IncrementalPolicy, LinearRulePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "OR_IPS")]
    OrIps,
    #[serde(rename = "IPW_IPS")]
    IpwIps,
    #[serde(rename = "ONE_STEP")]
    OneStep,
    #[serde(rename = "CROSS_FIT")]
    CrossFit,
    #[serde(rename = "OR_STD")]
    OrStd,
    #[serde(rename = "IPW_STD")]
    IpwStd,
    #[serde(rename = "AIPW_STD")]
    AipwStd,
}

impl Estimator {
    pub const ALL: [Estimator; 7] = [
        Estimator::OrIps,
        Estimator::IpwIps,
        Estimator::OneStep,
        Estimator::CrossFit,
        Estimator::OrStd,
        Estimator::IpwStd,
        Estimator::AipwStd,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::OrIps => "OR_IPS",
            Estimator::IpwIps => "IPW_IPS",
            Estimator::OneStep => "ONE_STEP",
            Estimator::CrossFit => "CROSS_FIT",
            Estimator::OrStd => "OR_STD",
            Estimator::IpwStd => "IPW_STD",
            Estimator::AipwStd => "AIPW_STD",
        }
    }

    /// Whether the estimator targets incremental (stochastic) policies.
    pub fn is_incremental(self) -> bool {
        matches!(
            self,
            Estimator::OrIps | Estimator::IpwIps | Estimator::OneStep | Estimator::CrossFit
        )
    }

    pub fn has_std_error(self) -> bool {
        matches!(self, Estimator::OneStep | Estimator::CrossFit)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Estimator::ALL
            .into_iter()
            .find(|e| e.tag() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown estimator `{s}`")))
    }
}

/// Point estimate with optional normal-theory uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub estimator: Estimator,
    /// NaN when `failed`.
    #[serde(serialize_with = "nan_as_null", deserialize_with = "null_as_nan")]
    pub value: f64,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_used: usize,
    pub failed: bool,
    pub failure_reason: Option<String>,
}

fn nan_as_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub const ZERO_PROPENSITY_REASON: &str = "zero propensity at matched unit";

impl ValueEstimate {
    fn point(estimator: Estimator, value: f64, n: usize) -> Self {
        Self {
            estimator,
            value,
            std_error: None,
            ci_low: None,
            ci_high: None,
            n_used: n,
            failed: false,
            failure_reason: None,
        }
    }

    fn with_se(estimator: Estimator, value: f64, se: f64, n: usize) -> Self {
        Self {
            std_error: Some(se),
            ci_low: Some(value - Z95 * se),
            ci_high: Some(value + Z95 * se),
            ..Self::point(estimator, value, n)
        }
    }

    pub fn failed(estimator: Estimator, n: usize, reason: impl Into<String>) -> Self {
        Self {
            failed: true,
            failure_reason: Some(reason.into()),
            ..Self::point(estimator, f64::NAN, n)
        }
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "estimator",
        "value",
        "std_error",
        "ci_low",
        "ci_high",
        "n",
        "failed",
        "reason",
    ];

    pub fn csv_record(&self) -> [String; 8] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.estimator.tag().to_string(),
            self.value.to_string(),
            opt(self.std_error),
            opt(self.ci_low),
            opt(self.ci_high),
            self.n_used.to_string(),
            self.failed.to_string(),
            self.failure_reason.clone().unwrap_or_default(),
        ]
    }
}

/// Observed treatment and outcome plus per-unit nuisance values.
#[derive(Debug, Clone, Copy)]
pub struct UnitData<'a> {
    pub a: &'a [u8],
    pub y: &'a [f64],
    pub nuis: &'a NuisancePredictions,
}

impl<'a> UnitData<'a> {
    pub fn new(a: &'a [u8], y: &'a [f64], nuis: &'a NuisancePredictions) -> Result<Self> {
        let n = a.len();
        for len in [y.len(), nuis.pi.len(), nuis.mu0.len(), nuis.mu1.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        Ok(Self { a, y, nuis })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    fn check(&self, per_unit: &[f64]) -> Result<()> {
        if per_unit.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: per_unit.len(),
            });
        }
        Ok(())
    }
}

#[inline]
fn denom(delta: f64, pi: f64) -> f64 {
    delta * pi + (1.0 - pi)
}

/// Per-unit OR-IPS integrand `[δπμ₁ + (1 − π)μ₀] / (δπ + 1 − π)`.
#[inline]
fn plug_in_term(delta: f64, pi: f64, mu0: f64, mu1: f64) -> f64 {
    (delta * pi * mu1 + (1.0 - pi) * mu0) / denom(delta, pi)
}

#[inline]
fn ipw_ips_term(delta: f64, pi: f64, a: u8, y: f64) -> f64 {
    let num = if a == 1 { delta } else { 1.0 };
    y * num / denom(delta, pi)
}

#[inline]
fn xi_term(delta: f64, pi: f64, mu0: f64, mu1: f64, a: u8, y: f64) -> f64 {
    let (r, _, c) = xi_parts(delta, pi, mu0, mu1, a, y);
    r + plug_in_term(delta, pi, mu0, mu1) + c
}

/// (residual term, plug-in term, propensity-correction term).
#[inline]
fn xi_parts(delta: f64, pi: f64, mu0: f64, mu1: f64, a: u8, y: f64) -> (f64, f64, f64) {
    let w = denom(delta, pi);
    let resid = if a == 1 { delta * (y - mu1) } else { y - mu0 };
    let a = f64::from(a);
    (
        resid / w,
        plug_in_term(delta, pi, mu0, mu1),
        delta * (mu1 - mu0) * (a - pi) / (w * w),
    )
}

fn mean_of(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    (0..n).map(f).collect::<NeumaierSum>().value() / n as f64
}

pub fn or_ips(u: &UnitData, delta: &[f64]) -> Result<ValueEstimate> {
    u.check(delta)?;
    let p = u.nuis;
    let v = mean_of(u.n(), |i| plug_in_term(delta[i], p.pi[i], p.mu0[i], p.mu1[i]));
    Ok(ValueEstimate::point(Estimator::OrIps, v, u.n()))
}

pub fn ipw_ips(u: &UnitData, delta: &[f64]) -> Result<ValueEstimate> {
    u.check(delta)?;
    let v = mean_of(u.n(), |i| ipw_ips_term(delta[i], u.nuis.pi[i], u.a[i], u.y[i]));
    Ok(ValueEstimate::point(Estimator::IpwIps, v, u.n()))
}

/// Per-unit uncentered influence function and its three components.
#[derive(Debug, Clone, PartialEq)]
pub struct EifTerms {
    pub xi: Vec<f64>,
    pub residual: Vec<f64>,
    pub plug_in: Vec<f64>,
    pub correction: Vec<f64>,
}

pub fn eif(u: &UnitData, delta: &[f64]) -> Result<EifTerms> {
    u.check(delta)?;
    let p = u.nuis;
    let n = u.n();
    let mut t = EifTerms {
        xi: Vec::with_capacity(n),
        residual: Vec::with_capacity(n),
        plug_in: Vec::with_capacity(n),
        correction: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (r, g, c) = xi_parts(delta[i], p.pi[i], p.mu0[i], p.mu1[i], u.a[i], u.y[i]);
        t.residual.push(r);
        t.plug_in.push(g);
        t.correction.push(c);
        t.xi.push(r + g + c);
    }
    Ok(t)
}

/// Mean of `ξ`, with standard error `sqrt(mean((ξ − value)²) / n)`.
pub fn one_step(u: &UnitData, delta: &[f64]) -> Result<ValueEstimate> {
    u.check(delta)?;
    let p = u.nuis;
    let n = u.n();
    let xi: Vec<f64> = (0..n)
        .map(|i| xi_term(delta[i], p.pi[i], p.mu0[i], p.mu1[i], u.a[i], u.y[i]))
        .collect();
    let v = mean_of(n, |i| xi[i]);
    let var = mean_of(n, |i| (xi[i] - v) * (xi[i] - v));
    Ok(ValueEstimate::with_se(
        Estimator::OneStep,
        v,
        (var / n as f64).sqrt(),
        n,
    ))
}

/// How the K fold estimates are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldWeighting {
    /// Unweighted mean of the fold estimates.
    #[default]
    Equal,
    /// Fold estimates weighted by fold size.
    BySize,
}

/// Cross-fitted estimate. `u.nuis` must hold, for every unit, the
/// predictions of the fit that excluded that unit's fold.
pub fn cross_fit(
    u: &UnitData,
    delta: &[f64],
    folds: &FoldAssignment,
    weighting: FoldWeighting,
) -> Result<ValueEstimate> {
    u.check(delta)?;
    u.check(&vec![0.0; folds.n])?;
    let p = u.nuis;
    let n = u.n();
    let xi: Vec<f64> = (0..n)
        .map(|i| xi_term(delta[i], p.pi[i], p.mu0[i], p.mu1[i], u.a[i], u.y[i]))
        .collect();
    let v = fold_average(&xi, folds, weighting, |x| x);
    let var = fold_average(&xi, folds, weighting, |x| (x - v) * (x - v));
    Ok(ValueEstimate::with_se(
        Estimator::CrossFit,
        v,
        (var / n as f64).sqrt(),
        n,
    ))
}

fn fold_average(values: &[f64], folds: &FoldAssignment, weighting: FoldWeighting, f: impl Fn(f64) -> f64) -> f64 {
    match weighting {
        FoldWeighting::BySize => mean_of(values.len(), |i| f(values[i])),
        FoldWeighting::Equal => {
            let mut sums = vec![NeumaierSum::new(); folds.k];
            let mut counts = vec![0usize; folds.k];
            for (i, &k) in folds.fold_of.iter().enumerate() {
                sums[k].add(f(values[i]));
                counts[k] += 1;
            }
            sums.iter()
                .zip(&counts)
                .map(|(s, &c)| s.value() / c as f64)
                .collect::<NeumaierSum>()
                .value()
                / folds.k as f64
        }
    }
}

/// Outcome-regression value of a deterministic rule, `mean μ̂_{d(xᵢ)}(xᵢ)`.
pub fn or_std(u: &UnitData, decisions: &[f64]) -> Result<ValueEstimate> {
    u.check(decisions)?;
    let p = u.nuis;
    let v = mean_of(u.n(), |i| if decisions[i] > 0.5 { p.mu1[i] } else { p.mu0[i] });
    Ok(ValueEstimate::point(Estimator::OrStd, v, u.n()))
}

fn weighted_std(u: &UnitData, decisions: &[f64], augmented: bool) -> Result<ValueEstimate> {
    u.check(decisions)?;
    let est = if augmented {
        Estimator::AipwStd
    } else {
        Estimator::IpwStd
    };
    let p = u.nuis;
    let mut acc = NeumaierSum::new();
    for i in 0..u.n() {
        let treat = decisions[i] > 0.5;
        let matched = (u.a[i] == 1) == treat;
        let (prob, mu) = if treat {
            (p.pi[i], p.mu1[i])
        } else {
            (1.0 - p.pi[i], p.mu0[i])
        };
        if matched && prob == 0.0 {
            return Ok(ValueEstimate::failed(est, u.n(), ZERO_PROPENSITY_REASON));
        }
        let weighted = if matched {
            if augmented {
                (u.y[i] - mu) / prob
            } else {
                u.y[i] / prob
            }
        } else {
            0.0
        };
        acc.add(if augmented { mu + weighted } else { weighted });
    }
    let v = acc.value() / u.n() as f64;
    if !v.is_finite() {
        return Ok(ValueEstimate::failed(est, u.n(), "non-finite weighted estimate"));
    }
    Ok(ValueEstimate::point(est, v, u.n()))
}

pub fn ipw_std(u: &UnitData, decisions: &[f64]) -> Result<ValueEstimate> {
    weighted_std(u, decisions, false)
}

pub fn aipw_std(u: &UnitData, decisions: &[f64]) -> Result<ValueEstimate> {
    weighted_std(u, decisions, true)
}

/// Estimate for any estimator tag given per-unit policy input: `δ` for
/// incremental estimators, 0/1 decisions for the standard ones.
pub fn estimate(
    estimator: Estimator,
    u: &UnitData,
    policy_input: &[f64],
    folds: Option<&FoldAssignment>,
    weighting: FoldWeighting,
) -> Result<ValueEstimate> {
    match estimator {
        Estimator::OrIps => or_ips(u, policy_input),
        Estimator::IpwIps => ipw_ips(u, policy_input),
        Estimator::OneStep => one_step(u, policy_input),
        Estimator::CrossFit => {
            let folds = folds.ok_or_else(|| Error::invalid("CROSS_FIT needs a fold assignment"))?;
            cross_fit(u, policy_input, folds, weighting)
        }
        Estimator::OrStd => or_std(u, policy_input),
        Estimator::IpwStd => ipw_std(u, policy_input),
        Estimator::AipwStd => aipw_std(u, policy_input),
    }
}

struct Prepared {
    preds: NuisancePredictions,
    delta: Vec<f64>,
}

fn prepare(ds: &Dataset, policy: &IncrementalPolicy, nuis: &NuisanceFit) -> Result<Prepared> {
    policy.validate()?;
    let rows = ds.unit_rows();
    let preds = nuis.predict(&rows)?;
    let delta = policy.deltas(&policy.feature_map.matrix(&rows)?)?;
    Ok(Prepared { preds, delta })
}

pub fn value_or_ips(ds: &Dataset, policy: &IncrementalPolicy, nuis: &NuisanceFit) -> Result<ValueEstimate> {
    let p = prepare(ds, policy, nuis)?;
    or_ips(&UnitData::new(ds.a(), ds.y(), &p.preds)?, &p.delta)
}

pub fn value_ipw_ips(ds: &Dataset, policy: &IncrementalPolicy, nuis: &NuisanceFit) -> Result<ValueEstimate> {
    let p = prepare(ds, policy, nuis)?;
    ipw_ips(&UnitData::new(ds.a(), ds.y(), &p.preds)?, &p.delta)
}

pub fn eif_terms(ds: &Dataset, policy: &IncrementalPolicy, nuis: &NuisanceFit) -> Result<EifTerms> {
    let p = prepare(ds, policy, nuis)?;
    eif(&UnitData::new(ds.a(), ds.y(), &p.preds)?, &p.delta)
}

pub fn value_one_step(ds: &Dataset, policy: &IncrementalPolicy, nuis: &NuisanceFit) -> Result<ValueEstimate> {
    let p = prepare(ds, policy, nuis)?;
    one_step(&UnitData::new(ds.a(), ds.y(), &p.preds)?, &p.delta)
}

pub fn value_cross_fit(
    ds: &Dataset,
    policy: &IncrementalPolicy,
    cfn: &CrossFitNuisance,
    weighting: FoldWeighting,
) -> Result<ValueEstimate> {
    policy.validate()?;
    let preds = cfn.predict(ds)?;
    let rows = ds.unit_rows();
    let delta = policy.deltas(&policy.feature_map.matrix(&rows)?)?;
    cross_fit(&UnitData::new(ds.a(), ds.y(), &preds)?, &delta, &cfn.folds, weighting)
}

/// OR, IPW and AIPW estimates (in that order) for a deterministic rule.
pub fn value_baselines(ds: &Dataset, policy: &LinearRulePolicy, nuis: &NuisanceFit) -> Result<[ValueEstimate; 3]> {
    let rows = ds.unit_rows();
    let preds = nuis.predict(&rows)?;
    let d = policy.decide(&policy.feature_map.matrix(&rows)?)?;
    let u = UnitData::new(ds.a(), ds.y(), &preds)?;
    Ok([or_std(&u, &d)?, ipw_std(&u, &d)?, aipw_std(&u, &d)?])
}
