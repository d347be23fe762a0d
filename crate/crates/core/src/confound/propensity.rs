//! Ridge-penalized logistic propensity model fit by Newton's method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ConfoundError;
use crate::linalg::{log1p_exp, logistic, solve_spd, ColumnScaler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    /// Ridge strength on standardized, non-intercept coefficients.
    pub l2_lambda: f64,
    /// Predictions are clipped into `[clip_eps, 1 - clip_eps]`.
    pub clip_eps: f64,
    pub max_iter: usize,
    /// Stop when the gradient norm of the penalized objective falls below this.
    pub grad_tol: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { l2_lambda: 1.0, clip_eps: 0.01, max_iter: 100, grad_tol: 1e-8 }
    }
}

/// Logistic model on `z = [1, x, φ]`. Coefficients live in the standardized
/// feature space recorded by `scaler`; the intercept column is exempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub scaler: ColumnScaler,
    pub l2_lambda: f64,
    pub clip_eps: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl PropensityModel {
    /// Linear score of one raw feature row (intercept included).
    pub fn score_row(&self, row: &[f64]) -> f64 {
        self.scaler.apply_row(row).iter().zip(&self.coefficients).map(|(z, b)| z * b).sum()
    }

    /// Unclipped treatment probability of one raw feature row.
    pub fn probability_row(&self, row: &[f64]) -> f64 {
        logistic(self.score_row(row))
    }

    pub fn clip(&self, p: f64) -> f64 {
        p.clamp(self.clip_eps, 1.0 - self.clip_eps)
    }
}

/// Penalized negative log-likelihood `Σ [log(1 + e^s) − w s] + λ/2 Σ_{j≥1} β_j²`
/// on already standardized features.
pub fn penalized_nll(z: &DMatrix<f64>, w: &[f64], beta: &DVector<f64>, lambda: f64) -> f64 {
    let s = z * beta;
    let data: f64 = s.iter().zip(w).map(|(&s, &w)| log1p_exp(s) - w * s).sum();
    data + 0.5 * lambda * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

fn check_inputs(features: &DMatrix<f64>, w: &[f64], config: &PropensityConfig) -> Result<(), ConfoundError> {
    if features.nrows() != w.len() {
        return Err(ConfoundError::DegenerateFeatures(format!("{} feature rows for {} units", features.nrows(), w.len())));
    }
    if features.ncols() == 0 {
        return Err(ConfoundError::DegenerateFeatures("no feature columns".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(ConfoundError::DegenerateFeatures("non-finite feature value".into()));
    }
    if w.len() < 2 {
        return Err(ConfoundError::TooFewUnits { units: w.len(), needed: 2 });
    }
    if !w.contains(&1.0) {
        return Err(ConfoundError::NoTreated);
    }
    if !w.contains(&0.0) {
        return Err(ConfoundError::NoControl);
    }
    if !(config.clip_eps > 0.0 && config.clip_eps < 0.5) {
        return Err(ConfoundError::InvalidConfig(format!("clip_eps must lie in (0, 0.5), got {}", config.clip_eps)));
    }
    if !(config.l2_lambda >= 0.0) {
        return Err(ConfoundError::InvalidConfig(format!("l2_lambda must be >= 0, got {}", config.l2_lambda)));
    }
    Ok(())
}

/// Fits the propensity model. Column 0 of `features` is the intercept.
///
/// Newton steps with step halving on the penalized objective, at most
/// `max_iter` iterations. An unpenalized fit whose scores separate the two
/// arms perfectly has no finite optimum and is reported as
/// [`ConfoundError::Separation`].
pub fn fit_propensity(features: &DMatrix<f64>, w: &[f64], config: &PropensityConfig) -> Result<PropensityModel, ConfoundError> {
    check_inputs(features, w, config)?;
    let lambda = config.l2_lambda;
    let scaler = ColumnScaler::fit(features, true);
    let z = scaler.apply(features);
    let p = z.ncols();
    let wv = DVector::from_column_slice(w);

    let mut beta = DVector::<f64>::zeros(p);
    let mut obj = penalized_nll(&z, w, &beta, lambda);
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        iterations = it + 1;
        let s = &z * &beta;
        let prob: Vec<f64> = s.iter().map(|&s| logistic(s)).collect();
        let resid = DVector::from_iterator(prob.len(), prob.iter().zip(wv.iter()).map(|(p, w)| p - w));
        let mut g = z.tr_mul(&resid);
        for j in 1..p {
            g[j] += lambda * beta[j];
        }
        grad_norm = g.norm();
        if grad_norm <= config.grad_tol {
            converged = true;
            break;
        }
        let curv: Vec<f64> = prob.iter().map(|p| p * (1.0 - p)).collect();
        let mut h = crate::linalg::weighted_gram(&z, &curv);
        for j in 1..p {
            h[(j, j)] += lambda;
        }
        let step = solve_spd(h.clone(), &g).or_else(|| {
            let jitter = 1e-10 * h.diagonal().max().max(1e-300);
            let mut hj = h;
            for j in 0..p {
                hj[(j, j)] += jitter;
            }
            solve_spd(hj, &g)
        });
        let Some(step) = step else {
            return Err(ConfoundError::Separation { lambda, detail: format!("singular Hessian at iteration {iterations}") });
        };
        let decrement = g.dot(&step);
        if !decrement.is_finite() {
            return Err(ConfoundError::Separation { lambda, detail: format!("non-finite Newton step at iteration {iterations}") });
        }
        // Collinear features can leave a gradient that no representable step
        // reduces; the decrement says the objective is already at round-off.
        if decrement <= 2e-12 * (1.0 + obj.abs()) {
            let cand = &beta - &step;
            let cand_obj = penalized_nll(&z, w, &cand, lambda);
            if cand_obj <= obj {
                beta = cand;
            }
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &step * t;
            let cand_obj = penalized_nll(&z, w, &cand, lambda);
            if cand_obj.is_finite() && cand_obj <= obj {
                let improved = cand_obj < obj;
                beta = cand;
                obj = cand_obj;
                accepted = improved;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No further decrease is representable; accept if the gradient is
            // already at round-off level.
            converged = grad_norm <= config.grad_tol.max(1e-6 * (w.len() as f64).sqrt());
            break;
        }
    }

    if beta.iter().any(|b| !b.is_finite()) {
        return Err(ConfoundError::Separation { lambda, detail: "coefficients diverged".into() });
    }
    if lambda == 0.0 {
        let s = &z * &beta;
        let separated = s.iter().zip(w).all(|(&s, &w)| if w == 1.0 { s > 0.0 } else { s < 0.0 });
        if separated {
            return Err(ConfoundError::Separation { lambda, detail: "treatment is perfectly predicted; the unpenalized optimum is at infinity".into() });
        }
    }
    if !converged {
        return Err(ConfoundError::Separation {
            lambda,
            detail: format!("Newton did not converge in {} iterations (gradient norm {grad_norm:.3e})", config.max_iter),
        });
    }
    Ok(PropensityModel { coefficients: beta.iter().copied().collect(), scaler, l2_lambda: lambda, clip_eps: config.clip_eps, iterations, gradient_norm: grad_norm })
}

/// Clipped fitted probabilities for raw feature rows.
pub fn predict_propensity(model: &PropensityModel, features: &DMatrix<f64>) -> Vec<f64> {
    let z = model.scaler.apply(features);
    let beta = DVector::from_column_slice(&model.coefficients);
    (z * beta).iter().map(|&s| model.clip(logistic(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_plus(cols: &[&[f64]]) -> DMatrix<f64> {
        let n = cols[0].len();
        DMatrix::from_fn(n, cols.len() + 1, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] })
    }

    #[test]
    fn intercept_only_recovers_treated_share() {
        let w = [1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let x = DMatrix::from_fn(8, 3, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let m = fit_propensity(&x, &w, &PropensityConfig::default()).unwrap();
        for e in predict_propensity(&m, &x) {
            assert!((e - 5.0 / 8.0).abs() < 1e-9, "{e}");
        }
    }

    #[test]
    fn zero_coefficients_predict_half() {
        let m = PropensityModel {
            coefficients: vec![0.0; 2],
            scaler: ColumnScaler::identity(2),
            l2_lambda: 1.0,
            clip_eps: 0.01,
            iterations: 0,
            gradient_norm: 0.0,
        };
        let x = intercept_plus(&[&[3.0, -2.0]]);
        assert_eq!(predict_propensity(&m, &x), vec![0.5, 0.5]);
    }

    #[test]
    fn extreme_scores_clip_exactly() {
        let m = PropensityModel {
            coefficients: vec![50.0, -50.0],
            scaler: ColumnScaler::identity(2),
            l2_lambda: 1.0,
            clip_eps: 0.01,
            iterations: 0,
            gradient_norm: 0.0,
        };
        let x = intercept_plus(&[&[0.0, 2.0]]);
        assert_eq!(predict_propensity(&m, &x), vec![0.99, 0.01]);
        let s = PropensityModel { coefficients: vec![0.3], scaler: ColumnScaler::identity(1), ..m };
        let p = s.probability_row(&[1.0]);
        assert!((p - 0.574_442_516_811_659_3).abs() < 1e-15);
    }

    #[test]
    fn separable_needs_ridge() {
        let f = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0];
        let w = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let x = intercept_plus(&[&f]);
        let unpen = PropensityConfig { l2_lambda: 0.0, ..Default::default() };
        assert!(matches!(fit_propensity(&x, &w, &unpen), Err(ConfoundError::Separation { .. })));
        let m = fit_propensity(&x, &w, &PropensityConfig::default()).unwrap();
        assert!(m.coefficients.iter().all(|c| c.is_finite()));
        assert!(m.gradient_norm <= 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = intercept_plus(&[&[1.0, f64::NAN]]);
        assert!(matches!(fit_propensity(&x, &[1.0, 0.0], &PropensityConfig::default()), Err(ConfoundError::DegenerateFeatures(_))));
        let x = intercept_plus(&[&[1.0, 2.0]]);
        assert!(matches!(fit_propensity(&x, &[1.0, 1.0], &PropensityConfig::default()), Err(ConfoundError::NoControl)));
    }
}
