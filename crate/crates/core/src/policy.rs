//! Incremental propensity score policies and deterministic linear rules.
//!
//! An incremental policy multiplies the odds of treatment by
//! `δ(x; β) = exp(features(x)·β)`, assigning treatment with probability
//! `d(x) = δπ / (δπ + 1 − π)`. Units with `π(x) = 0` are never treated
//! and units with `π(x) = 1` always are, whatever `δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;
use crate::numeric::Rows;

pub const DEFAULT_DELTA_CAP: f64 = 30.0;

/// `δπ / (δπ + 1 − π)`.
pub fn ips_prob(delta: f64, pi: f64) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("delta {delta} must be positive and finite")));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::invalid(format!("propensity {pi} outside [0, 1]")));
    }
    Ok(ips_prob_unchecked(delta, pi))
}

#[inline]
pub(crate) fn ips_prob_unchecked(delta: f64, pi: f64) -> f64 {
    let t = delta * pi;
    // t + (1 − π) rounds to exactly 1 when δ = 1, so d = π bit for bit.
    t / (t + (1.0 - pi))
}

/// The odds ratio `δ` that [`ips_prob`] maps back to `d`.
pub fn implied_odds_ratio(d: f64, pi: f64) -> Result<f64> {
    let open = |v: f64| v > 0.0 && v < 1.0;
    if !open(d) || !open(pi) {
        return Err(Error::invalid(format!(
            "odds ratio needs d = {d} and pi = {pi} strictly inside (0, 1)"
        )));
    }
    Ok((d / (1.0 - d)) / (pi / (1.0 - pi)))
}

/// Builds a policy's feature row from a unit row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    #[serde(default = "yes")]
    pub intercept: bool,
    /// Unit-row columns; `None` means all.
    #[serde(default)]
    pub columns: Option<Vec<usize>>,
}

fn yes() -> bool {
    true
}

impl Default for FeatureMap {
    fn default() -> Self {
        Self {
            intercept: true,
            columns: None,
        }
    }
}

impl FeatureMap {
    pub fn width(&self, unit_width: usize) -> usize {
        usize::from(self.intercept) + self.columns.as_ref().map_or(unit_width, Vec::len)
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.intercept {
            out.push(1.0);
        }
        match &self.columns {
            Some(cols) => out.extend(cols.iter().map(|&c| row[c])),
            None => out.extend_from_slice(row),
        }
    }

    pub fn matrix(&self, rows: &Rows) -> Result<Rows> {
        if let Some(cols) = &self.columns {
            if let Some(&c) = cols.iter().find(|&&c| c >= rows.width()) {
                return Err(Error::invalid(format!(
                    "policy feature column {c} out of range for width {}",
                    rows.width()
                )));
            }
        }
        let w = self.width(rows.width());
        let mut data = Vec::with_capacity(rows.len() * w);
        let mut buf = Vec::with_capacity(w);
        for r in rows.iter() {
            self.apply(r, &mut buf);
            data.extend_from_slice(&buf);
        }
        Ok(Rows::new(data, w))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_width(beta: &[f64], features: &Rows) -> Result<()> {
    if beta.len() != features.width() {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            got: features.width(),
        });
    }
    Ok(())
}

/// `δ(x; β) = exp(clip(features(x)·β, ±delta_cap))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalPolicy {
    pub beta: Vec<f64>,
    #[serde(default)]
    pub feature_map: FeatureMap,
    #[serde(default = "default_cap")]
    pub delta_cap: f64,
}

fn default_cap() -> f64 {
    DEFAULT_DELTA_CAP
}

impl IncrementalPolicy {
    pub fn new(beta: Vec<f64>) -> Self {
        Self {
            beta,
            feature_map: FeatureMap::default(),
            delta_cap: DEFAULT_DELTA_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_cap > 0.0) || !self.delta_cap.is_finite() {
            return Err(Error::invalid(format!("delta_cap {} must be positive", self.delta_cap)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("non-finite policy coefficient"));
        }
        Ok(())
    }

    /// `δ` for each row of a policy feature matrix.
    pub fn deltas(&self, features: &Rows) -> Result<Vec<f64>> {
        check_width(&self.beta, features)?;
        let mut out = vec![0.0; features.len()];
        deltas_into(&self.beta, features, self.delta_cap, &mut out);
        Ok(out)
    }
}

pub(crate) fn deltas_into(beta: &[f64], features: &Rows, cap: f64, out: &mut [f64]) {
    for (o, r) in out.iter_mut().zip(features.iter()) {
        *o = dot(r, beta).clamp(-cap, cap).exp();
    }
}

/// Treatment probabilities `d(x)` of an incremental policy on unit rows,
/// using the propensity of `nuis`.
pub fn eval_incremental(policy: &IncrementalPolicy, nuis: &NuisanceFit, rows: &Rows) -> Result<Vec<f64>> {
    policy.validate()?;
    let feats = policy.feature_map.matrix(rows)?;
    let deltas = policy.deltas(&feats)?;
    deltas
        .iter()
        .zip(rows.iter())
        .map(|(&d, r)| ips_prob(d, nuis.propensity(r)))
        .collect()
}

/// `I{features(x)·β > 0}` with `‖β‖₂ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearRuleRaw")]
pub struct LinearRulePolicy {
    beta: Vec<f64>,
    pub feature_map: FeatureMap,
}

#[derive(Deserialize)]
struct LinearRuleRaw {
    beta: Vec<f64>,
    #[serde(default)]
    feature_map: FeatureMap,
}

impl TryFrom<LinearRuleRaw> for LinearRulePolicy {
    type Error = Error;

    fn try_from(raw: LinearRuleRaw) -> Result<Self> {
        LinearRulePolicy::new(raw.beta, raw.feature_map)
    }
}

impl LinearRulePolicy {
    /// Renormalizes `beta` to the unit sphere; the zero vector is rejected.
    pub fn new(beta: Vec<f64>, feature_map: FeatureMap) -> Result<Self> {
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("linear rule coefficients must be nonzero and finite"));
        }
        Ok(Self {
            beta: beta.iter().map(|b| b / norm).collect(),
            feature_map,
        })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Decisions (0.0 or 1.0) for each row of a policy feature matrix.
    pub fn decide(&self, features: &Rows) -> Result<Vec<f64>> {
        check_width(&self.beta, features)?;
        Ok(features
            .iter()
            .map(|r| if dot(r, &self.beta) > 0.0 { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Decisions of a linear rule on unit rows.
pub fn eval_linear(policy: &LinearRulePolicy, rows: &Rows) -> Result<Vec<f64>> {
    policy.decide(&policy.feature_map.matrix(rows)?)
}

/// Either policy kind, as stored in policy JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Ips(IncrementalPolicy),
    Linear(LinearRulePolicy),
}

impl Policy {
    pub fn beta(&self) -> &[f64] {
        match self {
            Policy::Ips(p) => &p.beta,
            Policy::Linear(p) => p.beta(),
        }
    }

    pub fn feature_map(&self) -> &FeatureMap {
        match self {
            Policy::Ips(p) => &p.feature_map,
            Policy::Linear(p) => &p.feature_map,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::{FnPredictor, NuisanceFit};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn const_nuisance(pi: f64) -> NuisanceFit {
        NuisanceFit::from_predictors(
            Arc::new(FnPredictor::new("pi", move |_| pi)),
            Arc::new(FnPredictor::new("mu0", |_| 0.0)),
            Arc::new(FnPredictor::new("mu1", |_| 1.0)),
        )
    }

    #[test]
    fn ips_prob_examples() {
        assert!((ips_prob(1.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((ips_prob(2.0, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ips_prob(5.0, 0.0).unwrap(), 0.0);
        assert_eq!(ips_prob(5.0, 1.0).unwrap(), 1.0);
        assert!(ips_prob(0.0, 0.5).is_err());
        assert!(ips_prob(-1.0, 0.5).is_err());
        assert!(ips_prob(1.0, 1.5).is_err());
    }

    #[test]
    fn odds_ratio_examples() {
        assert!((implied_odds_ratio(0.3, 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert!((implied_odds_ratio(2.0 / 3.0, 0.5).unwrap() - 2.0).abs() < 1e-12);
        assert!(implied_odds_ratio(0.0, 0.5).is_err());
        assert!(implied_odds_ratio(0.5, 1.0).is_err());
    }

    #[test]
    fn zero_beta_returns_propensity() {
        let rows = Rows::new(vec![0.1, 0.7, -2.0], 1);
        let pol = IncrementalPolicy::new(vec![0.0, 0.0]);
        let d = eval_incremental(&pol, &const_nuisance(0.37), &rows).unwrap();
        assert!(d.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn saturates_at_cap() {
        let rows = Rows::new(vec![1.0, 2.0], 1);
        let pol = IncrementalPolicy {
            beta: vec![100.0],
            feature_map: FeatureMap {
                intercept: false,
                columns: None,
            },
            delta_cap: 30.0,
        };
        let d = eval_incremental(&pol, &const_nuisance(0.5), &rows).unwrap();
        let expected = 30f64.exp() / (30f64.exp() + 1.0);
        for v in d {
            assert!((v - expected).abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_three_shift_on_quarter_propensity() {
        let rows = Rows::new(vec![1.0], 1);
        let pol = IncrementalPolicy {
            beta: vec![3f64.ln()],
            feature_map: FeatureMap {
                intercept: false,
                columns: None,
            },
            delta_cap: 30.0,
        };
        let d = eval_incremental(&pol, &const_nuisance(0.25), &rows).unwrap();
        // 3·0.25 / (0.75 + 0.75)
        assert!((d[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_rule_examples() {
        let map = FeatureMap {
            intercept: true,
            columns: None,
        };
        let rows = Rows::new(vec![0.5, 0.0], 1);
        let pol = LinearRulePolicy::new(vec![0.0, 1.0], map.clone()).unwrap();
        assert_eq!(eval_linear(&pol, &rows).unwrap(), vec![1.0, 0.0]);
        let flipped = LinearRulePolicy::new(vec![0.0, -1.0], map.clone()).unwrap();
        // x = 0 sits on the boundary: both rules decline
        assert_eq!(eval_linear(&flipped, &rows).unwrap(), vec![0.0, 0.0]);
        assert!(LinearRulePolicy::new(vec![0.0, 0.0], map.clone()).is_err());
        let scaled = LinearRulePolicy::new(vec![3.0, 4.0], map).unwrap();
        assert_eq!(scaled.beta(), &[0.6, 0.8]);
        let wrong = Rows::new(vec![1.0, 2.0], 2);
        assert!(eval_linear(&pol, &wrong).is_err());
    }

    #[test]
    fn policy_json_roundtrip() {
        let p: Policy = serde_json::from_str(r#"{"kind":"linear","beta":[3,4]}"#).unwrap();
        assert_eq!(p.beta(), &[0.6, 0.8]);
        let p: Policy = serde_json::from_str(r#"{"kind":"ips","beta":[0,1],"delta_cap":10}"#).unwrap();
        let back: Policy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
        assert!(serde_json::from_str::<Policy>(r#"{"kind":"linear","beta":[0,0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn odds_ratio_round_trip(d in 1e-6f64..(1.0 - 1e-6), pi in 1e-6f64..(1.0 - 1e-6)) {
            let delta = implied_odds_ratio(d, pi).unwrap();
            prop_assert!((ips_prob(delta, pi).unwrap() - d).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_delta_and_pi(pi in 0.001f64..0.999, d1 in 0.01f64..50.0, step in 0.01f64..10.0) {
            let d2 = d1 + step;
            prop_assert!(ips_prob(d2, pi).unwrap() > ips_prob(d1, pi).unwrap());
            let pi2 = (pi + 0.0005).min(0.9995);
            prop_assert!(ips_prob(d1, pi2).unwrap() > ips_prob(d1, pi).unwrap());
        }

        #[test]
        fn identity_and_absorption(pi in 0.0f64..=1.0, delta in 1e-8f64..1e8) {
            prop_assert_eq!(ips_prob(1.0, pi).unwrap(), pi);
            prop_assert_eq!(ips_prob(delta, 0.0).unwrap(), 0.0);
            prop_assert_eq!(ips_prob(delta, 1.0).unwrap(), 1.0);
            let d = ips_prob(delta, pi).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
