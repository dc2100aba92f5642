//! Synthetic data-generating processes with known potential outcomes, and
//! the true-value oracles used to score learned policies.
//!
//! Units are drawn one at a time from a single stream in a fixed order
//! (group, covariates, treatment uniform, then the two outcome normals), so
//! a dataset is a pure function of `(scenario, n, stream)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{BasisTerm, FeatureSpec, FnPredictor, LearnerSpec, NuisanceFit};
use crate::numeric::{expit, open_unit, std_normal, stream, NeumaierSum, Rows, StreamTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Demographic-parity task with near-violations of positivity.
    FairDp,
    /// Four covariates, propensities well inside (0, 1).
    SufficientOverlap,
    /// The fair_dp process, used with parametric nuisance models.
    FairDpParametric,
    /// Outcome formulas applied to user-supplied covariates and treatment.
    SemiSyntheticFormula,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::FairDp,
        Scenario::SufficientOverlap,
        Scenario::FairDpParametric,
        Scenario::SemiSyntheticFormula,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FairDp => "fair_dp",
            Scenario::SufficientOverlap => "sufficient_overlap",
            Scenario::FairDpParametric => "fair_dp_parametric",
            Scenario::SemiSyntheticFormula => "semi_synthetic_formula",
        }
    }

    fn is_fair_dp(self) -> bool {
        matches!(self, Scenario::FairDp | Scenario::FairDpParametric)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
}

/// Observed data plus both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialDataset {
    pub data: Dataset,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    /// Known propensities; absent when treatment was supplied by the user.
    pub true_pi: Option<Vec<f64>>,
    /// Known `E[Y(1) − Y(0) | X]` per unit.
    pub cate: Option<Vec<f64>>,
}

impl PotentialDataset {
    pub fn n(&self) -> usize {
        self.data.n()
    }

    /// Writes `y,a[,s],<covariates>,y0,y1[,true_pi]`.
    pub fn write_csv_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut extra: Vec<(&str, &[f64])> = vec![("y0", &self.y0), ("y1", &self.y1)];
        if let Some(p) = &self.true_pi {
            extra.push(("true_pi", p));
        }
        self.data.write_csv_to(w, &extra)
    }
}

fn mu0_base(x1: f64, x2: f64, x3: f64) -> f64 {
    20.0 * (1.0 + x1 - x2 + x3 * x3 + x2.exp())
}

/// Unit-row based true functions: `[s, x1, x2, x3]` for the fair_dp
/// processes, `[x1, x2, x3, x4]` for sufficient overlap.
fn true_pi_row(scenario: Scenario, r: &[f64]) -> f64 {
    match scenario {
        Scenario::SufficientOverlap => expit(0.3 - 0.4 * r[0] - 0.2 * r[1] - 0.3 * r[2] + 0.1 * r[3]),
        _ => expit(-1.0 - r[1] + 1.5 * r[2] - 0.25 * r[3] - 3.1 * r[0]),
    }
}

fn true_mu0_row(scenario: Scenario, r: &[f64]) -> f64 {
    match scenario {
        Scenario::SufficientOverlap => mu0_base(r[0], r[1], r[2]),
        _ => mu0_base(r[1], r[2], r[3]),
    }
}

fn true_cate_row(scenario: Scenario, r: &[f64]) -> f64 {
    match scenario {
        Scenario::SufficientOverlap => 25.0 * (3.0 - 5.0 * r[0] + 2.0 * r[1] - 3.0 * r[2] + r[3]),
        _ => 25.0 * (3.0 - 5.0 * r[1] + 2.0 * r[2] - 3.0 * r[3] + r[0]),
    }
}

const OUTCOME_SD: f64 = 20.0;

/// Draws `n` units of a synthetic scenario from `rng`.
pub fn generate_with(scenario: Scenario, n: usize, rng: &mut ChaCha8Rng) -> Result<PotentialDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (width, names): (usize, &[&str]) = match scenario {
        Scenario::SemiSyntheticFormula => {
            return Err(Error::invalid(
                "semi_synthetic_formula needs user covariates; use semi_synthetic",
            ))
        }
        Scenario::SufficientOverlap => (4, &["x1", "x2", "x3", "x4"]),
        _ => (3, &["x1", "x2", "x3"]),
    };
    let with_s = scenario.is_fair_dp();
    let mut x = Vec::with_capacity(n * width);
    let mut s = Vec::with_capacity(if with_s { n } else { 0 });
    let (mut a, mut y, mut y0, mut y1) = (vec![0u8; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut pis, mut cates) = (vec![0.0; n], vec![0.0; n]);
    let sqrt_rest = (1.0f64 - 0.09).sqrt();
    let mut row = Vec::with_capacity(width + 1);
    for i in 0..n {
        row.clear();
        if with_s {
            let si = u32::from(open_unit(rng) < 0.5);
            s.push(si);
            row.push(f64::from(si));
            for _ in 0..3 {
                row.push(open_unit(rng));
            }
            x.extend_from_slice(&row[1..]);
        } else {
            let x1 = open_unit(rng);
            let x2 = open_unit(rng);
            let z1 = std_normal(rng);
            let z2 = std_normal(rng);
            row.extend_from_slice(&[x1, x2, z1, 0.3 * z1 + sqrt_rest * z2]);
            x.extend_from_slice(&row);
        }
        let pi = true_pi_row(scenario, &row);
        let ai = u8::from(open_unit(rng) < pi);
        let m0 = true_mu0_row(scenario, &row);
        let tau = true_cate_row(scenario, &row);
        let v0 = m0 + OUTCOME_SD * std_normal(rng);
        let v1 = m0 + tau + OUTCOME_SD * std_normal(rng);
        a[i] = ai;
        y0[i] = v0;
        y1[i] = v1;
        y[i] = if ai == 1 { v1 } else { v0 };
        pis[i] = pi;
        cates[i] = tau;
    }
    let data = Dataset::new(
        Rows::new(x, width),
        a,
        y,
        with_s.then_some(s),
        Some(names.iter().map(|s| s.to_string()).collect()),
    )?;
    Ok(PotentialDataset {
        data,
        y0,
        y1,
        true_pi: Some(pis),
        cate: Some(cates),
    })
}

/// Draws a dataset from `spec` using the generation stream of its seed.
pub fn generate(spec: &DgpSpec) -> Result<PotentialDataset> {
    let mut rng = stream(spec.seed, StreamTag::Generate, 0);
    generate_with(spec.scenario, spec.n, &mut rng)
}

/// Covariate columns the semi-synthetic formulas read, besides `race`.
pub const SEMI_SYNTHETIC_COLUMNS: [&str; 6] = [
    "gender",
    "age",
    "time_in_hospital",
    "num_lab_procedures",
    "num_medications",
    "number_diagnoses",
];

/// Potential outcomes from the hospital-data formulas on user covariates.
/// `race` is read from the sensitive attribute when present, otherwise
/// from a covariate column of that name. The observed treatment is kept.
pub fn semi_synthetic(covariates: &Dataset, seed: u64) -> Result<PotentialDataset> {
    let names = covariates
        .column_names()
        .ok_or_else(|| Error::invalid("semi-synthetic formulas need named covariate columns"))?;
    let col = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx: Vec<usize> = SEMI_SYNTHETIC_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let race: Vec<f64> = match covariates.s() {
        Some(s) => s.iter().map(|&g| f64::from(g)).collect(),
        None => {
            let j = col("race")?;
            (0..covariates.n()).map(|i| covariates.x().row(i)[j]).collect()
        }
    };
    let mut rng = stream(seed, StreamTag::Generate, 0);
    let n = covariates.n();
    let (mut y0, mut y1, mut cate) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let r = covariates.x().row(i);
        let v = |k: usize| r[idx[k]];
        let (gender, age, time, labs, meds, diag) = (v(0), v(1), v(2), v(3), v(4), v(5));
        let m0 = 20.0 * (1.0 + gender - age + time + labs + meds + meds * meds + diag.exp());
        let tau = 25.0 * (3.0 - 5.0 * age + 2.0 * time - 3.0 * meds + race[i]);
        y0[i] = m0 + OUTCOME_SD * std_normal(&mut rng);
        y1[i] = m0 + tau + OUTCOME_SD * std_normal(&mut rng);
        cate[i] = tau;
    }
    let a = covariates.a();
    let y = (0..n).map(|i| if a[i] == 1 { y1[i] } else { y0[i] }).collect();
    Ok(PotentialDataset {
        data: covariates.with_outcome(y)?,
        y0,
        y1,
        true_pi: None,
        cate: Some(cate),
    })
}

/// `mean(Y1ᵢ dᵢ + Y0ᵢ (1 − dᵢ))`.
pub fn true_value(pd: &PotentialDataset, d: &[f64]) -> Result<f64> {
    if d.len() != pd.n() {
        return Err(Error::DimensionMismatch {
            expected: pd.n(),
            got: d.len(),
        });
    }
    let acc: NeumaierSum = (0..d.len())
        .map(|i| pd.y1[i] * d[i] + pd.y0[i] * (1.0 - d[i]))
        .collect();
    Ok(acc.value() / d.len() as f64)
}

/// Value of the unconstrained optimal rule `I{CATE(x) > 0}`.
pub fn true_optimal_value(pd: &PotentialDataset) -> Result<f64> {
    let cate = pd
        .cate
        .as_ref()
        .ok_or_else(|| Error::NoClosedForm("user-supplied dataset".into()))?;
    let d: Vec<f64> = cate.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect();
    true_value(pd, &d)
}

/// The scenario's true `π`, `μ₀`, `μ₁` as a nuisance fit on unit rows.
pub fn true_nuisance(scenario: Scenario) -> Result<NuisanceFit> {
    if scenario == Scenario::SemiSyntheticFormula {
        return Err(Error::NoClosedForm(scenario.name().into()));
    }
    Ok(NuisanceFit::from_predictors(
        Arc::new(FnPredictor::new("true_pi", move |r: &[f64]| true_pi_row(scenario, r))),
        Arc::new(FnPredictor::new("true_mu0", move |r: &[f64]| true_mu0_row(scenario, r))),
        Arc::new(FnPredictor::new("true_mu1", move |r: &[f64]| {
            true_mu0_row(scenario, r) + true_cate_row(scenario, r)
        })),
    ))
}

/// True CATE of a synthetic scenario on a unit row.
pub fn true_cate(scenario: Scenario, row: &[f64]) -> Result<f64> {
    if scenario == Scenario::SemiSyntheticFormula {
        return Err(Error::NoClosedForm(scenario.name().into()));
    }
    Ok(true_cate_row(scenario, row))
}

pub const PARAMETRIC_RIDGE: f64 = 1e-6;

/// Correctly specified parametric learners: logistic propensity on all
/// unit-row columns, and per-arm least squares on the terms the outcome
/// means are built from.
pub fn parametric_specs(scenario: Scenario) -> Result<(LearnerSpec, LearnerSpec)> {
    use BasisTerm::{Exp, Raw, Square};
    let terms = match scenario {
        Scenario::FairDp | Scenario::FairDpParametric => vec![
            Raw { col: 0 },
            Raw { col: 1 },
            Raw { col: 2 },
            Raw { col: 3 },
            Square { col: 3 },
            Exp { col: 2 },
        ],
        Scenario::SufficientOverlap => vec![
            Raw { col: 0 },
            Raw { col: 1 },
            Raw { col: 2 },
            Raw { col: 3 },
            Square { col: 2 },
            Exp { col: 1 },
        ],
        Scenario::SemiSyntheticFormula => return Err(Error::NoClosedForm(scenario.name().into())),
    };
    // A vanishing penalty keeps the fit defined when a small treated arm
    // has no units from one sensitive group.
    Ok((
        LearnerSpec::logistic(),
        LearnerSpec::ridge(PARAMETRIC_RIDGE).with_features(FeatureSpec::basis(terms)),
    ))
}
