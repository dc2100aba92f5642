//! Policy constraints: demographic parity, equal opportunity, budget and
//! quantile protection, plus the `g ≤ 0` residual form fed to the learners.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::NeumaierSum;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    #[default]
    None,
    Dp,
    Eo,
    Budget,
    Quantile,
}

impl ConstraintKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "dp" => Ok(Self::Dp),
            "eo" => Ok(Self::Eo),
            "budget" => Ok(Self::Budget),
            "quantile" => Ok(Self::Quantile),
            other => Err(Error::invalid(format!("unknown constraint kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Dp => "dp",
            Self::Eo => "eo",
            Self::Budget => "budget",
            Self::Quantile => "quantile",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

/// One optional constraint. `threshold` is the bound `b`; `tau` is the
/// quantile level and only meaningful for `kind = quantile`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl ConstraintSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn dp(threshold: f64) -> Self {
        Self {
            kind: ConstraintKind::Dp,
            threshold,
            tau: None,
        }
    }

    pub fn eo(threshold: f64) -> Self {
        Self {
            kind: ConstraintKind::Eo,
            threshold,
            tau: None,
        }
    }

    pub fn budget(threshold: f64) -> Self {
        Self {
            kind: ConstraintKind::Budget,
            threshold,
            tau: None,
        }
    }

    pub fn quantile(threshold: f64, tau: f64) -> Self {
        Self {
            kind: ConstraintKind::Quantile,
            threshold,
            tau: Some(tau),
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != ConstraintKind::None
    }

    pub fn direction(&self) -> Direction {
        if self.kind == ConstraintKind::Quantile {
            Direction::AtLeast
        } else {
            Direction::AtMost
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() {
            return Err(Error::invalid("constraint threshold must be finite"));
        }
        match (self.kind, self.tau) {
            (ConstraintKind::Quantile, Some(t)) if t > 0.0 && t < 1.0 => Ok(()),
            (ConstraintKind::Quantile, Some(t)) => {
                Err(Error::invalid(format!("quantile tau must lie in (0,1), got {t}")))
            }
            (ConstraintKind::Quantile, None) => Err(Error::invalid("quantile constraint needs tau")),
            (_, Some(_)) => Err(Error::invalid("tau is only valid for the quantile constraint")),
            _ => Ok(()),
        }
    }
}

fn group_sizes(s: &[u32], n_groups: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0usize; n_groups];
    for &g in s {
        let g = g as usize;
        if g >= n_groups {
            return Err(Error::invalid(format!("group code {g} outside 0..{n_groups}")));
        }
        sizes[g] += 1;
    }
    Ok(sizes)
}

fn rss_deviation(means: impl Iterator<Item = f64>, overall: f64) -> f64 {
    means
        .map(|m| (m - overall) * (m - overall))
        .collect::<NeumaierSum>()
        .value()
        .sqrt()
}

/// Root sum of squares of the per-group mean of `d` around its overall mean.
pub fn dp_metric(d: &[f64], s: &[u32], n_groups: usize) -> Result<f64> {
    check_len(d.len(), s.len())?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sizes = group_sizes(s, n_groups)?;
    if let Some(g) = sizes.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(g));
    }
    let mut sums = vec![NeumaierSum::new(); n_groups];
    for (&di, &g) in d.iter().zip(s) {
        sums[g as usize].add(di);
    }
    let overall = NeumaierSum::merge_all(&sums) / d.len() as f64;
    Ok(rss_deviation(
        sums.iter().zip(&sizes).map(|(t, &c)| t.value() / c as f64),
        overall,
    ))
}

/// Like [`dp_metric`] but restricted to treated units.
pub fn eo_metric(d: &[f64], s: &[u32], a: &[u8], n_groups: usize) -> Result<f64> {
    check_len(d.len(), s.len())?;
    check_len(d.len(), a.len())?;
    group_sizes(s, n_groups)?;
    let mut sums = vec![NeumaierSum::new(); n_groups];
    let mut counts = vec![0usize; n_groups];
    for i in 0..d.len() {
        if a[i] == 1 {
            sums[s[i] as usize].add(d[i]);
            counts[s[i] as usize] += 1;
        }
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyTreatedGroup(g));
    }
    let total: usize = counts.iter().sum();
    let overall = NeumaierSum::merge_all(&sums) / total as f64;
    Ok(rss_deviation(
        sums.iter().zip(&counts).map(|(t, &c)| t.value() / c as f64),
        overall,
    ))
}

pub fn budget_metric(d: &[f64]) -> f64 {
    d.iter().copied().collect::<NeumaierSum>().value() / d.len() as f64
}

/// Smallest minimizer of `Σ cᵢ ρ_τ(yᵢ − q)`: the first `yᵢ` in ascending
/// order whose cumulative weight reaches `τ Σc`.
pub fn weighted_quantile(y: &[f64], c: &[f64], tau: f64) -> Result<f64> {
    check_len(y.len(), c.len())?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&i, &j| y[i].total_cmp(&y[j]));
    weighted_quantile_sorted(y, c, tau, &order)
}

/// [`weighted_quantile`] with a precomputed ascending order of `y`.
pub fn weighted_quantile_sorted(y: &[f64], c: &[f64], tau: f64, order: &[usize]) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("quantile tau must lie in (0,1), got {tau}")));
    }
    if c.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("quantile weights must be finite and nonnegative"));
    }
    let total = c.iter().copied().collect::<NeumaierSum>().value();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights("quantile weights sum to zero".into()));
    }
    // Relative slack so that exact ties at τΣc survive rounding in the running sum.
    let target = tau * total * (1.0 - 8.0 * f64::EPSILON);
    let mut cum = NeumaierSum::new();
    let mut last = None;
    for &i in order {
        if c[i] == 0.0 {
            continue;
        }
        cum.add(c[i]);
        last = Some(y[i]);
        if cum.value() >= target {
            return Ok(y[i]);
        }
    }
    last.ok_or_else(|| Error::DegenerateWeights("quantile weights sum to zero".into()))
}

/// Pseudo-outcome weights `cᵢ = Aᵢdᵢ + (1 − Aᵢ)(1 − dᵢ)`.
pub fn agreement_weights(a: &[u8], d: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(d)
        .map(|(&ai, &di)| if ai == 1 { di } else { 1.0 - di })
        .collect()
}

pub fn quantile_constraint(ds: &Dataset, d: &[f64], tau: f64) -> Result<f64> {
    check_len(ds.n(), d.len())?;
    weighted_quantile(ds.y(), &agreement_weights(ds.a(), d), tau)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Precomputed view of a dataset for repeated constraint evaluation.
#[derive(Debug, Clone)]
pub struct ConstraintEvaluator<'a> {
    spec: ConstraintSpec,
    a: &'a [u8],
    y: &'a [f64],
    s: Option<&'a [u32]>,
    n_groups: usize,
    order: Vec<usize>,
}

impl<'a> ConstraintEvaluator<'a> {
    pub fn new(spec: ConstraintSpec, ds: &'a Dataset) -> Result<Self> {
        spec.validate()?;
        let needs_groups = matches!(spec.kind, ConstraintKind::Dp | ConstraintKind::Eo);
        if needs_groups && ds.s().is_none() {
            return Err(Error::invalid(format!(
                "{} constraint needs a sensitive attribute column",
                spec.kind.name()
            )));
        }
        let order = if spec.kind == ConstraintKind::Quantile {
            let y = ds.y();
            let mut order: Vec<usize> = (0..y.len()).collect();
            order.sort_by(|&i, &j| y[i].total_cmp(&y[j]));
            order
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            a: ds.a(),
            y: ds.y(),
            s: ds.s(),
            n_groups: ds.n_groups(),
            order,
        })
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    /// The raw constraint metric (`Q̂_τ` for the quantile kind).
    pub fn metric(&self, d: &[f64]) -> Result<f64> {
        check_len(self.a.len(), d.len())?;
        match self.spec.kind {
            ConstraintKind::None => Ok(0.0),
            ConstraintKind::Dp => dp_metric(d, self.s.unwrap_or_default(), self.n_groups),
            ConstraintKind::Eo => eo_metric(d, self.s.unwrap_or_default(), self.a, self.n_groups),
            ConstraintKind::Budget => Ok(budget_metric(d)),
            ConstraintKind::Quantile => weighted_quantile_sorted(
                self.y,
                &agreement_weights(self.a, d),
                self.spec.tau.unwrap_or(0.5),
                &self.order,
            ),
        }
    }

    /// Residual `g` with feasibility meaning `g ≤ 0`.
    pub fn residual(&self, d: &[f64]) -> Result<f64> {
        let m = self.metric(d)?;
        Ok(residual_of(&self.spec, m))
    }
}

/// Converts a metric value into the `g ≤ 0` residual.
pub fn residual_of(spec: &ConstraintSpec, metric: f64) -> f64 {
    match spec.kind {
        ConstraintKind::None => 0.0,
        ConstraintKind::Quantile => spec.threshold - metric,
        _ => metric - spec.threshold,
    }
}

pub fn residual(spec: &ConstraintSpec, ds: &Dataset, d: &[f64]) -> Result<f64> {
    ConstraintEvaluator::new(*spec, ds)?.residual(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dp_examples() {
        assert_eq!(dp_metric(&[0.3; 4], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        let v = dp_metric(&[1.0, 1.0, 0.0, 0.0], &[0, 0, 1, 1], 2).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert_eq!(dp_metric(&[0.1, 0.9, 0.4], &[0, 0, 0], 1).unwrap(), 0.0);
        assert!(matches!(dp_metric(&[0.1, 0.2], &[0, 0], 2), Err(Error::EmptyGroup(1))));
    }

    #[test]
    fn eo_examples() {
        assert_eq!(eo_metric(&[0.2; 3], &[0, 1, 1], &[1, 1, 0], 2).unwrap(), 0.0);
        let v = eo_metric(&[1.0, 0.0], &[0, 1], &[1, 1], 2).unwrap();
        assert!((v - 0.5f64.hypot(0.5)).abs() < 1e-12);
        assert_eq!(eo_metric(&[0.7, 0.1], &[0, 0], &[1, 0], 1).unwrap(), 0.0);
        let err = eo_metric(&[0.7, 0.1], &[0, 1], &[1, 0], 2).unwrap_err();
        assert!(matches!(err, Error::EmptyTreatedGroup(1)));
        assert!(err.to_string().contains('1'));
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_metric(&[1.0, 0.0, 1.0, 0.0]), 0.5);
        assert_eq!(budget_metric(&[0.0; 3]), 0.0);
        assert!((budget_metric(&[0.2, 0.4]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(weighted_quantile(&[1.0, 2.0, 3.0], &[1.0; 3], 0.5).unwrap(), 2.0);
        assert_eq!(weighted_quantile(&[5.0, 1.0, 3.0], &[0.0, 1.0, 1.0], 0.5).unwrap(), 1.0);
        assert_eq!(
            weighted_quantile(&[4.0, -2.0, 3.0], &[1.0, 0.0, 2.0], 1e-9).unwrap(),
            3.0
        );
        assert!(matches!(
            weighted_quantile(&[1.0, 2.0], &[0.0, 0.0], 0.5),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn spec_validation_and_json() {
        let s: ConstraintSpec = serde_json::from_str(r#"{"kind":"dp","threshold":0.01}"#).unwrap();
        assert_eq!(s, ConstraintSpec::dp(0.01));
        assert!(ConstraintSpec {
            kind: ConstraintKind::Quantile,
            threshold: 1.0,
            tau: None
        }
        .validate()
        .is_err());
        assert!(ConstraintSpec {
            kind: ConstraintKind::Dp,
            threshold: 1.0,
            tau: Some(0.5)
        }
        .validate()
        .is_err());
        assert!(ConstraintSpec::quantile(0.0, 1.0).validate().is_err());
        assert_eq!(ConstraintSpec::quantile(2.0, 0.5).direction(), Direction::AtLeast);
        assert_eq!(residual_of(&ConstraintSpec::quantile(2.0, 0.5), 3.0), -1.0);
        assert_eq!(residual_of(&ConstraintSpec::budget(0.25), 0.5), 0.25);
    }
}
