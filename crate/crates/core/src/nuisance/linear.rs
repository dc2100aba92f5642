//! Ridge regression and logistic regression fitted by IRLS.

use nalgebra::{DMatrix, DVector};

use super::features::FeatureSpec;
use super::{FitDiagnostics, Predictor};
use crate::error::{Error, Result};
use crate::numeric::{expit, softplus, NeumaierSum, Rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

/// `g⁻¹(b₀ + z·b)`, optionally clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub features: FeatureSpec,
    /// Intercept first.
    pub coef: Vec<f64>,
    pub link: Link,
    pub clamp_unit: bool,
}

impl LinearModel {
    fn eval(&self, z: &[f64]) -> f64 {
        let eta = self.coef[0] + self.coef[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>();
        let v = match self.link {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        };
        if self.clamp_unit {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    }
}

impl Predictor for LinearModel {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut z = Vec::with_capacity(self.coef.len());
        self.features.build(row, &mut z);
        self.eval(&z)
    }

    fn predict_rows(&self, rows: &Rows) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.coef.len());
        rows.iter()
            .map(|r| {
                self.features.build(r, &mut z);
                self.eval(&z)
            })
            .collect()
    }
}

/// Design matrix with a leading intercept column.
pub(crate) fn design(rows: &Rows, features: &FeatureSpec) -> DMatrix<f64> {
    let k = features.n_features(rows.width()) + 1;
    let mut z = Vec::with_capacity(k);
    let mut m = DMatrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        features.build(r, &mut z);
        m[(i, 0)] = 1.0;
        for (j, v) in z.iter().enumerate() {
            m[(i, j + 1)] = *v;
        }
    }
    m
}

fn rank_deficient(m: &DMatrix<f64>) -> bool {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    !(max > 0.0) || min <= max * 1e-13
}

/// Minimizes `Σ (yᵢ − b₀ − zᵢ·b)² + λ‖b‖²`; the intercept is unpenalized.
pub fn fit_ridge(rows: &Rows, y: &[f64], features: &FeatureSpec, lambda: f64) -> Result<(LinearModel, FitDiagnostics)> {
    let z = design(rows, features);
    let k = z.ncols();
    let mut gram = z.tr_mul(&z);
    for j in 1..k {
        gram[(j, j)] += lambda;
    }
    if rank_deficient(&gram) {
        return Err(Error::Singular(format!(
            "ridge normal equations with lambda = {lambda} on {} rows and {k} coefficients",
            rows.len()
        )));
    }
    let rhs = z.tr_mul(&DVector::from_column_slice(y));
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("ridge normal equations not positive definite".into()))?
        .solve(&rhs);
    let model = LinearModel {
        features: features.clone(),
        coef: coef.iter().copied().collect(),
        link: Link::Identity,
        clamp_unit: false,
    };
    let resid = &z * &coef - DVector::from_column_slice(y);
    let mse = resid.iter().map(|r| r * r).collect::<NeumaierSum>().value() / rows.len() as f64;
    Ok((
        model,
        FitDiagnostics {
            model: "ridge".into(),
            n_train: rows.len(),
            loss: mse,
            iterations: 1,
            converged: true,
        },
    ))
}

fn log_likelihood(z: &DMatrix<f64>, a: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = z * beta;
    eta.iter()
        .zip(a)
        .map(|(&e, &ai)| ai * e - softplus(e))
        .collect::<NeumaierSum>()
        .value()
}

/// Logistic regression by iteratively reweighted least squares with step
/// halving. Under separation the iteration cap is reached and the fit is
/// flagged non-converged; its predictions remain usable.
pub fn fit_logistic(
    rows: &Rows,
    a: &[f64],
    features: &FeatureSpec,
    max_iter: usize,
    tol: f64,
) -> Result<(LinearModel, FitDiagnostics)> {
    let z = design(rows, features);
    let (n, k) = z.shape();
    let mut beta = DVector::zeros(k);
    let mut ll = log_likelihood(&z, a, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let eta = &z * &beta;
        let p: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(n, a.iter().zip(&p).map(|(ai, pi)| ai - pi));
        let grad = z.tr_mul(&resid);
        let mut zw = z.clone();
        for (i, pi) in p.iter().enumerate() {
            let w = pi * (1.0 - pi);
            zw.row_mut(i).scale_mut(w);
        }
        let mut hess = z.tr_mul(&zw);
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                // Near-separation makes the weights vanish; a tiny ridge keeps
                // the Newton direction defined.
                let jitter = 1e-10 * (hess.trace() / k as f64).max(1e-300);
                for j in 0..k {
                    hess[(j, j)] += jitter;
                }
                match hess.cholesky() {
                    Some(c) => c.solve(&grad),
                    None => break,
                }
            }
        };
        let mut t = 1.0;
        let mut cand = &beta + &step * t;
        let mut ll_new = log_likelihood(&z, a, &cand);
        let mut halvings = 0;
        while !(ll_new >= ll - 1e-12 * ll.abs()) && halvings < 40 {
            t *= 0.5;
            cand = &beta + &step * t;
            ll_new = log_likelihood(&z, a, &cand);
            halvings += 1;
        }
        if !(ll_new >= ll - 1e-12 * ll.abs()) {
            break;
        }
        let rel = (ll_new - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        beta = cand;
        ll = ll_new;
        if rel < tol {
            converged = true;
            break;
        }
    }
    // Fitted probabilities numerically at 0 or 1 signal (quasi-)separation:
    // the likelihood has no finite maximizer.
    if (&z * &beta).amax() > 30.0 {
        converged = false;
    }
    let model = LinearModel {
        features: features.clone(),
        coef: beta.iter().copied().collect(),
        link: Link::Logit,
        clamp_unit: true,
    };
    Ok((
        model,
        FitDiagnostics {
            model: "logistic".into(),
            n_train: n,
            loss: -ll / n as f64,
            iterations,
            converged,
        },
    ))
}

/// Mean score vector `(1/n) Zᵀ(a − p)` of a fitted logistic model.
pub fn logistic_mean_score(rows: &Rows, a: &[f64], model: &LinearModel) -> Vec<f64> {
    let z = design(rows, &model.features);
    let p = model.predict_rows(rows);
    let resid = DVector::from_iterator(a.len(), a.iter().zip(&p).map(|(ai, pi)| ai - pi));
    (z.tr_mul(&resid) / a.len() as f64).iter().copied().collect()
}

/// Inverse observed information of a logistic fit, for standard errors.
pub fn logistic_covariance(rows: &Rows, model: &LinearModel) -> Option<DMatrix<f64>> {
    let z = design(rows, &model.features);
    let p = model.predict_rows(rows);
    let mut zw = z.clone();
    for (i, pi) in p.iter().enumerate() {
        zw.row_mut(i).scale_mut(pi * (1.0 - pi));
    }
    z.tr_mul(&zw).try_inverse()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_interpolates_exact_linear_data() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 7.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x).collect();
        let (m, _) = fit_ridge(&Rows::new(xs, 1), &y, &FeatureSpec::all(), 0.0).unwrap();
        assert!((m.coef[0] - 1.0).abs() < 1e-10, "{:?}", m.coef);
        assert!((m.coef[1] - 2.0).abs() < 1e-10, "{:?}", m.coef);
    }

    #[test]
    fn ridge_intercept_only_is_constant() {
        let rows = Rows::new(vec![0.1, 0.5, 0.9], 1);
        let (m, _) = fit_ridge(&rows, &[4.0, 4.0, 4.0], &FeatureSpec::none(), 0.0).unwrap();
        for x in [-3.0, 0.2, 17.0] {
            assert!((m.predict(&[x]) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_singular_without_penalty() {
        // duplicated column
        let rows = Rows::new(vec![0.1, 0.1, 0.5, 0.5, 0.9, 0.9, 0.3, 0.3], 2);
        let y = [1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            fit_ridge(&rows, &y, &FeatureSpec::all(), 0.0),
            Err(Error::Singular(_))
        ));
        assert!(fit_ridge(&rows, &y, &FeatureSpec::all(), 0.1).is_ok());
    }

    #[test]
    fn logistic_separation_is_flagged() {
        let xs: Vec<f64> = (-10..10).map(|i| i as f64 + 0.5).collect();
        let a: Vec<f64> = xs.iter().map(|&x| f64::from(u8::from(x > 0.0))).collect();
        let rows = Rows::new(xs, 1);
        let (m, diag) = fit_logistic(&rows, &a, &FeatureSpec::all(), 100, 1e-10).unwrap();
        assert!(!diag.converged);
        assert!(m.predict(&[-9.5]) < 1e-6);
        assert!(m.predict(&[9.5]) > 1.0 - 1e-6);
    }

    #[test]
    fn logistic_score_vanishes_at_convergence() {
        let xs: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let a: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| f64::from(u8::from(((i * 31) % 17) as f64 / 17.0 < expit(0.5 * x))))
            .collect();
        let rows = Rows::new(xs, 1);
        let (m, diag) = fit_logistic(&rows, &a, &FeatureSpec::all(), 100, 1e-10).unwrap();
        assert!(diag.converged);
        let score = logistic_mean_score(&rows, &a, &m);
        assert!(score.iter().map(|s| s * s).sum::<f64>().sqrt() < 1e-6, "{score:?}");
    }
}
