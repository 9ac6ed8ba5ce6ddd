use nalgebra::{DMatrix, DVector};

use super::{FeatureRow, N_FEATURES};
use crate::error::{Error, Result};

pub const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: [f64; N_FEATURES],
}

impl LinearModel {
    pub fn predict(&self, x: &[f64; N_FEATURES]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Ridge-regularized least squares on centered data; the intercept is not
/// penalized.
pub fn fit_lr(rows: &[FeatureRow]) -> Result<LinearModel> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!("linear regression needs 2 rows, got {}", rows.len())));
    }
    let n = rows.len() as f64;
    let mut mx = [0.0; N_FEATURES];
    let mut my = 0.0;
    for r in rows {
        for (m, v) in mx.iter_mut().zip(&r.features) {
            *m += v / n;
        }
        my += r.target / n;
    }
    let constant = (0..N_FEATURES).all(|j| rows.iter().all(|r| r.features[j] == rows[0].features[j]));
    if constant {
        return Err(Error::Degenerate("all feature rows are identical".into()));
    }
    let x = DMatrix::from_fn(rows.len(), N_FEATURES, |i, j| rows[i].features[j] - mx[j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.target - my));
    let mut a = x.transpose() * &x;
    for j in 0..N_FEATURES {
        a[(j, j)] += RIDGE;
    }
    let b = x.transpose() * y;
    let beta = match a.clone().cholesky() {
        Some(c) => c.solve(&b),
        None => a.lu().solve(&b).ok_or_else(|| Error::Degenerate("normal equations are singular".into()))?,
    };
    let mut coef = [0.0; N_FEATURES];
    coef.copy_from_slice(beta.as_slice());
    let intercept = my - coef.iter().zip(&mx).map(|(c, m)| c * m).sum::<f64>();
    Ok(LinearModel { intercept, coef })
}
