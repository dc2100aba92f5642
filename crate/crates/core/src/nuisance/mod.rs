//! Nuisance functions: the propensity `π(x) = Pr(A = 1 | X = x)` and the
//! arm-wise outcome regressions `μ_a(x) = E[Y | X = x, A = a]`, fitted on
//! the full sample or cross-fitted over K folds.
//!
//! Propensities are never trimmed; fitted values of exactly 0 or 1 are
//! passed through to the estimators.

mod features;
pub mod linear;
pub mod trees;

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{BasisTerm, FeatureSpec, FeatureTransform};
pub use linear::{LinearModel, Link};
pub use trees::{BoostParams, BoostedTrees};

use crate::data::{make_folds, Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::numeric::Rows;

/// A fitted regression function over unit rows.
pub trait Predictor: Send + Sync + fmt::Debug {
    fn predict(&self, row: &[f64]) -> f64;

    fn predict_rows(&self, rows: &Rows) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

/// Wraps a closure as a predictor; used for known (oracle) nuisances.
pub struct FnPredictor<F> {
    name: &'static str,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(name: &'static str, f: F) -> Self {
        Self { name, f }
    }
}

impl<F> fmt::Debug for FnPredictor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnPredictor({})", self.name)
    }
}

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, row: &[f64]) -> f64 {
        (self.f)(row)
    }
}

fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-10
}
fn default_n_trees() -> usize {
    BoostParams::default().n_trees
}
fn default_depth() -> usize {
    BoostParams::default().max_depth
}
fn default_lr() -> f64 {
    BoostParams::default().learning_rate
}
fn default_min_leaf() -> usize {
    BoostParams::default().min_leaf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    Logistic {
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Ridge {
        #[serde(default)]
        lambda: f64,
    },
    BoostedTrees {
        #[serde(default = "default_n_trees")]
        n_trees: usize,
        #[serde(default = "default_depth")]
        max_depth: usize,
        #[serde(default = "default_lr")]
        learning_rate: f64,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
    },
}

/// Learner choice, hyperparameters and regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub features: FeatureSpec,
}

impl LearnerSpec {
    pub fn logistic() -> Self {
        Self {
            kind: LearnerKind::Logistic {
                max_iter: default_max_iter(),
                tol: default_tol(),
            },
            features: FeatureSpec::all(),
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self {
            kind: LearnerKind::Ridge { lambda },
            features: FeatureSpec::all(),
        }
    }

    pub fn boosted_trees() -> Self {
        let p = BoostParams::default();
        Self {
            kind: LearnerKind::BoostedTrees {
                n_trees: p.n_trees,
                max_depth: p.max_depth,
                learning_rate: p.learning_rate,
                min_leaf: p.min_leaf,
            },
            features: FeatureSpec::all(),
        }
    }

    pub fn with_features(mut self, features: FeatureSpec) -> Self {
        self.features = features;
        self
    }

    /// Default spec for a learner name (`logistic`, `ridge`, `boosted_trees`).
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "logistic" => Ok(Self::logistic()),
            "ridge" => Ok(Self::ridge(0.0)),
            "boosted_trees" | "trees" => Ok(Self::boosted_trees()),
            other => Err(Error::invalid(format!("unknown learner `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LearnerKind::Logistic { max_iter, tol } => {
                if max_iter == 0 || !(tol > 0.0) {
                    return Err(Error::invalid("logistic needs max_iter >= 1 and tol > 0"));
                }
            }
            LearnerKind::Ridge { lambda } => {
                if !(lambda >= 0.0) || !lambda.is_finite() {
                    return Err(Error::invalid(format!("ridge lambda {lambda} must be >= 0")));
                }
            }
            LearnerKind::BoostedTrees {
                n_trees,
                max_depth,
                learning_rate,
                min_leaf,
            } => {
                if n_trees == 0 || max_depth == 0 || min_leaf == 0 {
                    return Err(Error::invalid("boosted trees need n_trees, max_depth, min_leaf >= 1"));
                }
                if !(learning_rate > 0.0 && learning_rate <= 1.0) {
                    return Err(Error::invalid(format!("learning rate {learning_rate} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Per-model fit summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub model: String,
    pub n_train: usize,
    /// Mean training loss (squared error, or negative log-likelihood).
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits `Pr(A = 1 | x)` on all rows.
pub fn fit_propensity(ds: &Dataset, spec: &LearnerSpec) -> Result<(Arc<dyn Predictor>, FitDiagnostics)> {
    spec.validate()?;
    spec.features.validate(ds.unit_width())?;
    if ds.n() < 2 {
        return Err(Error::invalid("propensity fit needs at least 2 rows"));
    }
    let rows = ds.unit_rows();
    let a: Vec<f64> = ds.a().iter().map(|&v| f64::from(v)).collect();
    Ok(match spec.kind {
        LearnerKind::Logistic { max_iter, tol } => {
            let (m, d) = linear::fit_logistic(&rows, &a, &spec.features, max_iter, tol)?;
            (Arc::new(m), d)
        }
        LearnerKind::Ridge { lambda } => {
            let (mut m, d) = linear::fit_ridge(&rows, &a, &spec.features, lambda)?;
            m.clamp_unit = true;
            (Arc::new(m), d)
        }
        LearnerKind::BoostedTrees {
            n_trees,
            max_depth,
            learning_rate,
            min_leaf,
        } => {
            let params = BoostParams {
                n_trees,
                max_depth,
                learning_rate,
                min_leaf,
            };
            let (m, d) = trees::fit_boosted(&rows, &a, &spec.features, params, true);
            (Arc::new(m), d)
        }
    })
}

/// Fits `E[Y | x, A = arm]` on the rows with `A = arm`.
pub fn fit_outcome_arm(ds: &Dataset, arm: u8, spec: &LearnerSpec) -> Result<(Arc<dyn Predictor>, FitDiagnostics)> {
    spec.validate()?;
    spec.features.validate(ds.unit_width())?;
    if arm > 1 {
        return Err(Error::invalid(format!("arm {arm} is not 0 or 1")));
    }
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.a()[i] == arm).collect();
    let need = spec.features.n_features(ds.unit_width()) + 2;
    if idx.len() < need {
        return Err(Error::InsufficientArmSample {
            arm,
            have: idx.len(),
            need,
        });
    }
    let rows = ds.unit_rows().select(&idx);
    let y: Vec<f64> = idx.iter().map(|&i| ds.y()[i]).collect();
    Ok(match spec.kind {
        LearnerKind::Logistic { .. } => {
            return Err(Error::invalid("logistic learner is for binary targets only"));
        }
        LearnerKind::Ridge { lambda } => {
            let (m, d) = linear::fit_ridge(&rows, &y, &spec.features, lambda)?;
            (Arc::new(m), d)
        }
        LearnerKind::BoostedTrees {
            n_trees,
            max_depth,
            learning_rate,
            min_leaf,
        } => {
            let params = BoostParams {
                n_trees,
                max_depth,
                learning_rate,
                min_leaf,
            };
            let (m, d) = trees::fit_boosted(&rows, &y, &spec.features, params, false);
            (Arc::new(m), d)
        }
    })
}

/// Per-unit nuisance values.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions {
    pub pi: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
}

impl NuisancePredictions {
    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    fn check(&self) -> Result<()> {
        if let Some(i) = self.pi.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidData(format!(
                "propensity {} at unit {i} outside [0, 1]",
                self.pi[i]
            )));
        }
        if self.mu0.iter().chain(&self.mu1).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome prediction".into()));
        }
        Ok(())
    }
}

/// Fitted `π̂`, `μ̂₀`, `μ̂₁`.
#[derive(Clone, Debug)]
pub struct NuisanceFit {
    propensity: Arc<dyn Predictor>,
    outcome0: Arc<dyn Predictor>,
    outcome1: Arc<dyn Predictor>,
    pub diagnostics: Vec<FitDiagnostics>,
}

impl NuisanceFit {
    pub fn from_predictors(
        propensity: Arc<dyn Predictor>,
        outcome0: Arc<dyn Predictor>,
        outcome1: Arc<dyn Predictor>,
    ) -> Self {
        Self {
            propensity,
            outcome0,
            outcome1,
            diagnostics: Vec::new(),
        }
    }

    pub fn propensity(&self, row: &[f64]) -> f64 {
        self.propensity.predict(row)
    }

    pub fn outcome0(&self, row: &[f64]) -> f64 {
        self.outcome0.predict(row)
    }

    pub fn outcome1(&self, row: &[f64]) -> f64 {
        self.outcome1.predict(row)
    }

    /// `μ̂₁(x) − μ̂₀(x)`.
    pub fn contrast(&self, row: &[f64]) -> f64 {
        self.outcome1(row) - self.outcome0(row)
    }

    pub fn propensity_model(&self) -> &Arc<dyn Predictor> {
        &self.propensity
    }

    pub fn predict(&self, rows: &Rows) -> Result<NuisancePredictions> {
        let p = NuisancePredictions {
            pi: self.propensity.predict_rows(rows),
            mu0: self.outcome0.predict_rows(rows),
            mu1: self.outcome1.predict_rows(rows),
        };
        p.check()?;
        Ok(p)
    }
}

/// Full-sample fit of all three nuisance functions.
pub fn fit_full(ds: &Dataset, spec_pi: &LearnerSpec, spec_mu: &LearnerSpec) -> Result<NuisanceFit> {
    let (pi, d_pi) = fit_propensity(ds, spec_pi)?;
    let (m0, d0) = fit_outcome_arm(ds, 0, spec_mu)?;
    let (m1, d1) = fit_outcome_arm(ds, 1, spec_mu)?;
    Ok(NuisanceFit {
        propensity: pi,
        outcome0: m0,
        outcome1: m1,
        diagnostics: vec![d_pi, d0, d1],
    })
}

/// K nuisance fits, fit k trained on every unit outside fold k.
#[derive(Clone, Debug)]
pub struct CrossFitNuisance {
    pub folds: FoldAssignment,
    pub fits: Vec<NuisanceFit>,
}

impl CrossFitNuisance {
    pub fn from_parts(folds: FoldAssignment, fits: Vec<NuisanceFit>) -> Result<Self> {
        if fits.len() != folds.k {
            return Err(Error::DimensionMismatch {
                expected: folds.k,
                got: fits.len(),
            });
        }
        Ok(Self { folds, fits })
    }

    /// Predictions where unit i uses the fit that excluded its own fold.
    pub fn predict(&self, ds: &Dataset) -> Result<NuisancePredictions> {
        if ds.n() != self.folds.n {
            return Err(Error::DimensionMismatch {
                expected: self.folds.n,
                got: ds.n(),
            });
        }
        let rows = ds.unit_rows();
        let n = ds.n();
        let mut out = NuisancePredictions {
            pi: vec![0.0; n],
            mu0: vec![0.0; n],
            mu1: vec![0.0; n],
        };
        for (k, fit) in self.fits.iter().enumerate() {
            let idx = self.folds.members(k);
            let p = fit.predict(&rows.select(&idx))?;
            for (j, &i) in idx.iter().enumerate() {
                out.pi[i] = p.pi[j];
                out.mu0[i] = p.mu0[j];
                out.mu1[i] = p.mu1[j];
            }
        }
        Ok(out)
    }

    /// Propensity used when a cross-fit policy is deployed on new units:
    /// the average of the K fold propensities.
    pub fn deployed_propensity(&self, rows: &Rows) -> Vec<f64> {
        let k = self.fits.len() as f64;
        let mut acc = vec![0.0; rows.len()];
        for fit in &self.fits {
            for (a, p) in acc.iter_mut().zip(fit.propensity.predict_rows(rows)) {
                *a += p;
            }
        }
        acc.iter().map(|a| (a / k).clamp(0.0, 1.0)).collect()
    }
}

/// Cross-fitted nuisances over freshly drawn folds. Folds are fitted in
/// parallel; results do not depend on scheduling.
pub fn fit_crossfit(
    ds: &Dataset,
    k: usize,
    seed: u64,
    spec_pi: &LearnerSpec,
    spec_mu: &LearnerSpec,
) -> Result<CrossFitNuisance> {
    let folds = make_folds(ds.n(), k, seed)?;
    fit_crossfit_with(ds, folds, spec_pi, spec_mu)
}

pub fn fit_crossfit_with(
    ds: &Dataset,
    folds: FoldAssignment,
    spec_pi: &LearnerSpec,
    spec_mu: &LearnerSpec,
) -> Result<CrossFitNuisance> {
    if folds.n != ds.n() {
        return Err(Error::DimensionMismatch {
            expected: ds.n(),
            got: folds.n,
        });
    }
    let fits = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let train = ds.subset(&folds.complement(fold));
            fit_full(&train, spec_pi, spec_mu).map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossFitNuisance { folds, fits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rows;

    fn toy(n: usize) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let a: Vec<u8> = (0..n).map(|i| u8::from((i * 13) % 7 < 3)).collect();
        let y: Vec<f64> = xs
            .iter()
            .zip(&a)
            .map(|(x, &a)| 1.0 + 2.0 * x + 3.0 * f64::from(a) * x)
            .collect();
        Dataset::new(Rows::new(xs, 1), a, y, None, None).unwrap()
    }

    #[test]
    fn constant_treated_arm_is_constant() {
        let xs = Rows::new(vec![0.1, 0.2, 0.3, 0.4], 1);
        let ds = Dataset::new(xs, vec![1, 1, 0, 0], vec![5.0, 5.0, 1.0, 2.0], None, None).unwrap();
        let spec = LearnerSpec::ridge(0.0).with_features(FeatureSpec::none());
        let (m, _) = fit_outcome_arm(&ds, 1, &spec).unwrap();
        assert!((m.predict(&[0.9]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn missing_arm_is_an_error() {
        let xs = Rows::new(vec![0.1, 0.2, 0.3], 1);
        let ds = Dataset::new(xs, vec![1, 1, 1], vec![1.0, 2.0, 3.0], None, None).unwrap();
        let err = fit_outcome_arm(&ds, 0, &LearnerSpec::ridge(0.0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientArmSample { arm: 0, have: 0, .. }));
        assert!(err.to_string().contains("insufficient arm sample"));
        assert!(fit_full(&ds, &LearnerSpec::logistic(), &LearnerSpec::ridge(0.0)).is_err());
    }

    #[test]
    fn constant_treatment_boosted_propensity_is_one() {
        let xs = Rows::new((0..40).map(f64::from).collect(), 1);
        let ds = Dataset::new(xs, vec![1; 40], vec![0.0; 40], None, None).unwrap();
        let (p, _) = fit_propensity(&ds, &LearnerSpec::boosted_trees()).unwrap();
        for x in [-1.0, 3.0, 50.0] {
            assert_eq!(p.predict(&[x]), 1.0);
        }
    }

    #[test]
    fn contrast_is_difference() {
        let ds = toy(120);
        let fit = fit_full(&ds, &LearnerSpec::logistic(), &LearnerSpec::boosted_trees()).unwrap();
        for i in 0..100 {
            let row = [i as f64 / 37.0 - 1.0];
            assert_eq!(fit.contrast(&row), fit.outcome1(&row) - fit.outcome0(&row));
        }
    }

    #[test]
    fn learner_spec_json() {
        let s: LearnerSpec = serde_json::from_str(r#"{"kind":"boosted_trees","n_trees":50}"#).unwrap();
        assert_eq!(
            s.kind,
            LearnerKind::BoostedTrees {
                n_trees: 50,
                max_depth: 2,
                learning_rate: 0.1,
                min_leaf: 10
            }
        );
        let back: LearnerSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let bad: LearnerSpec = serde_json::from_str(r#"{"kind":"ridge","lambda":-1}"#).unwrap();
        assert!(bad.validate().is_err());
        let bad: LearnerSpec = serde_json::from_str(r#"{"kind":"boosted_trees","learning_rate":1.5}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn crossfit_shapes_and_errors() {
        let ds = toy(200);
        let cf = fit_crossfit(&ds, 2, 5, &LearnerSpec::logistic(), &LearnerSpec::ridge(0.0)).unwrap();
        assert_eq!(cf.fits.len(), 2);
        for f in &cf.fits {
            assert_eq!(f.diagnostics[0].n_train, 100);
        }
        // leave-one-out on a tiny sample starves an arm
        let small = toy(6);
        let err = fit_crossfit(&small, 6, 1, &LearnerSpec::logistic(), &LearnerSpec::ridge(0.0));
        assert!(err.is_err());
    }
}
