//! Out-of-sample propensity model metrics by stratified k-fold cross-validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::propensity::{fit_propensity, predict_propensity, PropensityConfig};
use super::ConfoundError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluationMetrics {
    /// Mean held-out negative log-likelihood per unit.
    pub nll: f64,
    /// Held-out accuracy at the 0.5 threshold.
    pub acc: f64,
    pub auc: f64,
}

/// Mean Bernoulli negative log-likelihood.
pub fn mean_nll(w: &[f64], p: &[f64]) -> f64 {
    let s: f64 = w.iter().zip(p).map(|(&w, &p)| -(w * p.ln() + (1.0 - w) * (1.0 - p).ln())).sum();
    s / w.len() as f64
}

pub fn accuracy(w: &[f64], p: &[f64]) -> f64 {
    let hits = w.iter().zip(p).filter(|(&w, &p)| (p >= 0.5) == (w == 1.0)).count();
    hits as f64 / w.len() as f64
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, ties at midranks.
pub fn auc(w: &[f64], score: &[f64]) -> f64 {
    let n = score.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && score[order[j + 1]] == score[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let n1 = w.iter().filter(|&&w| w == 1.0).count() as f64;
    let n0 = n as f64 - n1;
    let r1: f64 = ranks.iter().zip(w).filter(|(_, &w)| w == 1.0).map(|(r, _)| r).sum();
    (r1 - n1 * (n1 + 1.0) / 2.0) / (n1 * n0)
}

/// Fold id per unit; each arm is shuffled separately and dealt round-robin.
pub fn stratified_folds(w: &[f64], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; w.len()];
    let mut next = 0;
    for arm in [1.0, 0.0] {
        let mut idx: Vec<usize> = (0..w.len()).filter(|&i| w[i] == arm).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % folds;
            next += 1;
        }
    }
    fold
}

/// Cross-validated NLL, accuracy and AUC of the propensity model.
pub fn evaluate_propensity(
    features: &DMatrix<f64>,
    w: &[f64],
    folds: usize,
    seed: u64,
    config: &PropensityConfig,
) -> Result<ModelEvaluationMetrics, ConfoundError> {
    let n = w.len();
    if folds < 2 || n < 2 * folds {
        return Err(ConfoundError::TooFewUnits { units: n, needed: 2 * folds.max(2) });
    }
    let fold = stratified_folds(w, folds, seed);
    let mut held_out = vec![0.0; n];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let xt = features.select_rows(train.iter());
        let wt: Vec<f64> = train.iter().map(|&i| w[i]).collect();
        let model = fit_propensity(&xt, &wt, config)?;
        let pred = predict_propensity(&model, &features.select_rows(test.iter()));
        for (&i, p) in test.iter().zip(pred) {
            held_out[i] = p;
        }
    }
    Ok(ModelEvaluationMetrics { nll: mean_nll(w, &held_out), acc: accuracy(w, &held_out), auc: auc(w, &held_out) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_handles_ties_and_perfect_ranking() {
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &[0.1, 0.2, 0.8, 0.9]), 1.0);
        assert_eq!(auc(&[0.0, 1.0], &[0.5, 0.5]), 0.5);
        assert_eq!(auc(&[1.0, 0.0, 1.0, 0.0], &[0.4, 0.4, 0.9, 0.1]), 0.875);
    }

    #[test]
    fn folds_are_stratified() {
        let w: Vec<f64> = (0..20).map(|i| (i % 4 == 0) as u8 as f64).collect();
        let f = stratified_folds(&w, 5, 3);
        for k in 0..5 {
            let treated = (0..20).filter(|&i| f[i] == k && w[i] == 1.0).count();
            assert_eq!(treated, 1);
        }
    }

    #[test]
    fn too_few_units() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let r = evaluate_propensity(&x, &[1.0, 0.0, 1.0, 0.0, 1.0], 3, 0, &PropensityConfig::default());
        assert!(matches!(r, Err(ConfoundError::TooFewUnits { .. })));
    }
}
