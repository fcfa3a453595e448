//! Linear Cox regression on clinical covariates, fitted by Newton's method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::concordance_index;
use crate::error::{Error, Result};
use crate::losses::cox::linear_cox_derivatives;
use crate::losses::SurvivalView;

const MAX_ITER: usize = 50;
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCox {
    /// Coefficients on standardized covariates.
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub iterations: usize,
}

impl LinearCox {
    /// Covariates are standardized with the training moments before fitting.
    pub fn fit(covariates: &[Vec<f64>], times: &[f64], events: &[bool]) -> Result<Self> {
        let n = covariates.len();
        let p = covariates.first().map_or(0, Vec::len);
        if n == 0 || p == 0 || covariates.iter().any(|r| r.len() != p) {
            return Err(Error::Input("clinical covariates must be a non-empty rectangular matrix".into()));
        }
        if covariates.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "linear_cox" });
        }
        if !events.iter().any(|e| *e) {
            return Err(Error::Input("clinical baseline needs at least one event".into()));
        }
        let mut mean = vec![0.0; p];
        for r in covariates {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut std = vec![0.0; p];
        for r in covariates {
            std.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m).powi(2) / n as f64);
        }
        let std: Vec<f64> = std.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let x: Vec<Vec<f64>> = covariates
            .iter()
            .map(|r| r.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect();

        let risks_of = |beta: &[f64]| -> Vec<f64> {
            x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
        };
        let mut beta = vec![0.0; p];
        let mut iterations = 0;
        for it in 0..MAX_ITER {
            iterations = it + 1;
            let risks = risks_of(&beta);
            let (loss, grad, hess) = linear_cox_derivatives(SurvivalView { risks: &risks, times, events }, &x)?;
            let step = newton_step(&grad, &hess)?;
            // Halve the step until the loss does not increase.
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
                let l = crate::losses::cox_loss(&risks_of(&cand), times, events)?;
                if l <= loss {
                    beta = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !accepted || gnorm < 1e-10 * (1.0 + loss.abs()) {
                break;
            }
        }
        Ok(LinearCox { beta, mean, std, iterations })
    }

    pub fn predict(&self, covariates: &[Vec<f64>]) -> Vec<f64> {
        covariates
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&self.beta)
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|((x, b), (m, s))| b * (x - m) / s)
                    .sum()
            })
            .collect()
    }
}

fn newton_step(grad: &[f64], hess: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = grad.len();
    let h = DMatrix::from_fn(p, p, |i, j| hess[i][j]);
    let g = DVector::from_column_slice(grad);
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(&g).iter().copied().collect());
    }
    let ridged = h + DMatrix::identity(p, p) * RIDGE;
    match ridged.cholesky() {
        Some(ch) => Ok(ch.solve(&g).iter().copied().collect()),
        None => Err(Error::Numerical("clinical Cox Hessian is singular even with ridge".into())),
    }
}

/// Fits on the training rows and returns the test c-index.
pub fn clinical_cox_baseline(
    train_x: &[Vec<f64>],
    train_times: &[f64],
    train_events: &[bool],
    test_x: &[Vec<f64>],
    test_times: &[f64],
    test_events: &[bool],
) -> Result<f64> {
    let fit = LinearCox::fit(train_x, train_times, train_events)?;
    concordance_index(&fit.predict(test_x), test_times, test_events)
}
