use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::AttributeVector;
use crate::error::{Error, Result};
use crate::model::Item;

/// Linear predictor of item discrimination and difficulty from attributes.
///
/// Features are the continuous attributes followed by reference-coded
/// dummies for each discrete code (level 0 is the reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricPredictor {
    pub continuous: usize,
    pub levels: Vec<u32>,
    pub intercept_a: f64,
    pub coef_a: Vec<f64>,
    pub intercept_b: f64,
    pub coef_b: Vec<f64>,
    pub rmse_a: f64,
    pub rmse_b: f64,
    pub a_min: f64,
}

impl PsychometricPredictor {
    pub fn feature_count(continuous: usize, levels: &[u32]) -> usize {
        continuous
            + levels
                .iter()
                .map(|&l| l.saturating_sub(1) as usize)
                .sum::<usize>()
    }

    pub fn features(&self, v: &AttributeVector) -> Vec<f64> {
        encode(v, self.continuous, &self.levels)
    }

    pub fn predict_a(&self, v: &AttributeVector) -> f64 {
        let f = self.features(v);
        (self.intercept_a + dot(&self.coef_a, &f)).max(self.a_min)
    }

    pub fn predict_b(&self, v: &AttributeVector) -> f64 {
        self.intercept_b + dot(&self.coef_b, &self.features(v))
    }

    /// Predictor that returns constants; every attribute vector maps to `(a, b)`.
    pub fn constant(continuous: usize, levels: Vec<u32>, a: f64, b: f64) -> Self {
        let p = Self::feature_count(continuous, &levels);
        PsychometricPredictor {
            continuous,
            levels,
            intercept_a: a,
            coef_a: vec![0.0; p],
            intercept_b: b,
            coef_b: vec![0.0; p],
            rmse_a: 0.0,
            rmse_b: 0.0,
            a_min: 0.05,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn encode(v: &AttributeVector, continuous: usize, levels: &[u32]) -> Vec<f64> {
    let mut f: Vec<f64> = v.continuous.iter().take(continuous).copied().collect();
    f.resize(continuous, 0.0);
    for (j, &l) in levels.iter().enumerate() {
        let code = v.discrete.get(j).copied().unwrap_or(0);
        for level in 1..l {
            f.push(if code == level { 1.0 } else { 0.0 });
        }
    }
    f
}

struct RidgeFit {
    intercept: f64,
    coef: Vec<f64>,
    rmse: f64,
}

fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<RidgeFit> {
    let (n, p) = x.shape();
    let means = DVector::from_fn(p, |j, _| x.column(j).mean());
    let y_mean = y.mean();
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let yc = y.map(|v| v - y_mean);
    let mut gram = xc.transpose() * &xc;
    if lambda == 0.0 {
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if !(min > 1e-10 * max.max(1e-300)) {
            return Err(Error::Singular(
                "attribute design matrix is rank deficient; use a positive ridge".into(),
            ));
        }
    }
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * &yc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("normal equations not positive definite".into()))?;
    let beta = chol.solve(&rhs);
    let intercept = y_mean - means.dot(&beta);
    let fitted = x * &beta;
    let sse: f64 = fitted
        .iter()
        .zip(y.iter())
        .map(|(f, t)| (f + intercept - t).powi(2))
        .sum();
    Ok(RidgeFit {
        intercept,
        coef: beta.iter().copied().collect(),
        rmse: (sse / n as f64).sqrt(),
    })
}

/// Ridge regression of `a` and `b` on attribute features over every bank
/// item that carries an attribute vector. The intercepts are not penalized.
pub fn fit_psychometric_predictor(
    items: &[Item],
    levels: &[u32],
    ridge_lambda: f64,
) -> Result<PsychometricPredictor> {
    if !(ridge_lambda >= 0.0) {
        return Err(Error::Config("ridge must be >= 0".into()));
    }
    let rows: Vec<(&AttributeVector, f64, f64)> = items
        .iter()
        .filter_map(|it| it.attributes.as_ref().map(|v| (v, it.a, it.b)))
        .collect();
    let continuous = rows.first().map(|r| r.0.continuous.len()).unwrap_or(0);
    let p = PsychometricPredictor::feature_count(continuous, levels);
    if rows.len() < 2 * p.max(1) {
        return Err(Error::InsufficientData(format!(
            "need at least {} items with attributes, have {}",
            2 * p.max(1),
            rows.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.0.continuous.len() != continuous) {
        return Err(Error::Shape {
            expected: continuous,
            got: r.0.continuous.len(),
        });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, p, |i, j| encode(rows[i].0, continuous, levels)[j]);
    let ya = DVector::from_iterator(n, rows.iter().map(|r| r.1));
    let yb = DVector::from_iterator(n, rows.iter().map(|r| r.2));
    let fa = ridge(&x, &ya, ridge_lambda)?;
    let fb = ridge(&x, &yb, ridge_lambda)?;
    Ok(PsychometricPredictor {
        continuous,
        levels: levels.to_vec(),
        intercept_a: fa.intercept,
        coef_a: fa.coef,
        intercept_b: fb.intercept,
        coef_b: fb.coef,
        rmse_a: fa.rmse,
        rmse_b: fb.rmse,
        a_min: 0.05,
    })
}
