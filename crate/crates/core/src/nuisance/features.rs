use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One derived regressor built from unit-row columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BasisTerm {
    Raw { col: usize },
    Square { col: usize },
    Exp { col: usize },
    Product { col: usize, other: usize },
}

impl BasisTerm {
    fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            BasisTerm::Raw { col } => row[col],
            BasisTerm::Square { col } => row[col] * row[col],
            BasisTerm::Exp { col } => row[col].exp(),
            BasisTerm::Product { col, other } => row[col] * row[other],
        }
    }

    fn max_col(&self) -> usize {
        match *self {
            BasisTerm::Raw { col } | BasisTerm::Square { col } | BasisTerm::Exp { col } => col,
            BasisTerm::Product { col, other } => col.max(other),
        }
    }
}

/// Expansion applied to the selected columns before fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureTransform {
    #[default]
    Linear,
    /// Selected columns, their squares and all pairwise products.
    Quadratic,
    /// Explicit list of terms over unit-row column indices. Overrides the
    /// column selection.
    Basis { terms: Vec<BasisTerm> },
}

/// Maps a unit row to the regressors of a learner (no intercept; learners
/// add their own).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FeatureSpec {
    /// Unit-row columns to use; `None` means all.
    #[serde(default)]
    pub columns: Option<Vec<usize>>,
    #[serde(default)]
    pub transform: FeatureTransform,
}

impl FeatureSpec {
    pub fn all() -> Self {
        Self::default()
    }

    /// Intercept only.
    pub fn none() -> Self {
        Self {
            columns: Some(Vec::new()),
            transform: FeatureTransform::Linear,
        }
    }

    pub fn basis(terms: Vec<BasisTerm>) -> Self {
        Self {
            columns: None,
            transform: FeatureTransform::Basis { terms },
        }
    }

    pub fn validate(&self, unit_width: usize) -> Result<()> {
        let bad = |c: usize| {
            Error::invalid(format!(
                "feature column {c} out of range for unit rows of width {unit_width}"
            ))
        };
        if let Some(cols) = &self.columns {
            if let Some(&c) = cols.iter().find(|&&c| c >= unit_width) {
                return Err(bad(c));
            }
        }
        if let FeatureTransform::Basis { terms } = &self.transform {
            if let Some(t) = terms.iter().find(|t| t.max_col() >= unit_width) {
                return Err(bad(t.max_col()));
            }
        }
        Ok(())
    }

    fn selected(&self, unit_width: usize) -> Vec<usize> {
        self.columns.clone().unwrap_or_else(|| (0..unit_width).collect())
    }

    /// Number of regressors produced for unit rows of the given width.
    pub fn n_features(&self, unit_width: usize) -> usize {
        let k = self.selected(unit_width).len();
        match &self.transform {
            FeatureTransform::Linear => k,
            FeatureTransform::Quadratic => k + k * (k + 1) / 2,
            FeatureTransform::Basis { terms } => terms.len(),
        }
    }

    pub fn build(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match &self.transform {
            FeatureTransform::Basis { terms } => out.extend(terms.iter().map(|t| t.eval(row))),
            FeatureTransform::Linear => match &self.columns {
                Some(cols) => out.extend(cols.iter().map(|&c| row[c])),
                None => out.extend_from_slice(row),
            },
            FeatureTransform::Quadratic => {
                let cols = self.selected(row.len());
                out.extend(cols.iter().map(|&c| row[c]));
                for (i, &c) in cols.iter().enumerate() {
                    for &d in &cols[i..] {
                        out.push(row[c] * row[d]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansions() {
        let row = [2.0, 3.0];
        let mut out = Vec::new();
        FeatureSpec::all().build(&row, &mut out);
        assert_eq!(out, vec![2.0, 3.0]);
        let q = FeatureSpec {
            columns: None,
            transform: FeatureTransform::Quadratic,
        };
        q.build(&row, &mut out);
        assert_eq!(out, vec![2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(q.n_features(2), 5);
        FeatureSpec::none().build(&row, &mut out);
        assert!(out.is_empty());
        let b = FeatureSpec::basis(vec![BasisTerm::Exp { col: 0 }, BasisTerm::Product { col: 0, other: 1 }]);
        b.build(&row, &mut out);
        assert_eq!(out, vec![2f64.exp(), 6.0]);
        assert!(b.validate(1).is_err());
        assert!(b.validate(2).is_ok());
    }

    #[test]
    fn json_shape() {
        let spec: FeatureSpec =
            serde_json::from_str(r#"{"transform":{"type":"basis","terms":[{"op":"square","col":3}]}}"#).unwrap();
        assert_eq!(spec.n_features(4), 1);
    }
}
