//! Cluster bootstrap for the Hajek estimate.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hajek::hajek_ate;
use super::propensity::{fit_propensity, predict_propensity, PropensityConfig};
use super::ConfoundError;
use crate::linalg::sample_sd;

/// Redraws allowed per replicate before giving up on getting both arms.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
    /// Resample whole groups of units sharing an image key rather than single units.
    pub cluster_by_key: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_boot: 200, seed: 0, cluster_by_key: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub tau: f64,
    pub se: f64,
    pub replicates: Vec<f64>,
}

/// Groups unit indices by key, in order of first appearance.
pub fn clusters_by_key<S: AsRef<str>>(keys: &[S]) -> Vec<Vec<usize>> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        let s = *slot.entry(k.as_ref()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[s].push(i);
    }
    groups
}

/// Units drawn for replicate `replicate`; redraws until both arms appear.
pub fn resample_units(groups: &[Vec<usize>], w: &[f64], seed: u64, replicate: usize) -> Result<Vec<usize>, ConfoundError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(replicate as u64));
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut units = Vec::with_capacity(w.len());
        for _ in 0..groups.len() {
            units.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
        }
        let treated = units.iter().filter(|&&i| w[i] == 1.0).count();
        if treated > 0 && treated < units.len() {
            return Ok(units);
        }
    }
    Err(ConfoundError::DegenerateResample { replicate })
}

/// Full-sample Hajek estimate with a bootstrap standard error. Each replicate
/// refits the propensity model on its resample with generator seed
/// `seed + replicate`.
pub fn bootstrap_ate<S: AsRef<str> + Sync>(
    features: &DMatrix<f64>,
    w: &[f64],
    y: &[f64],
    keys: &[S],
    propensity: &PropensityConfig,
    config: &BootstrapConfig,
) -> Result<BootstrapResult, ConfoundError> {
    if config.n_boot < 2 {
        return Err(ConfoundError::InvalidConfig(format!("n_boot must be >= 2, got {}", config.n_boot)));
    }
    let model = fit_propensity(features, w, propensity)?;
    let tau = hajek_ate(w, y, &predict_propensity(&model, features))?;

    let groups = if config.cluster_by_key { clusters_by_key(keys) } else { (0..w.len()).map(|i| vec![i]).collect() };
    let replicates = (0..config.n_boot)
        .into_par_iter()
        .map(|r| {
            let units = resample_units(&groups, w, config.seed, r)?;
            let xb = features.select_rows(units.iter());
            let wb: Vec<f64> = units.iter().map(|&i| w[i]).collect();
            let yb: Vec<f64> = units.iter().map(|&i| y[i]).collect();
            let m = fit_propensity(&xb, &wb, propensity)?;
            hajek_ate(&wb, &yb, &predict_propensity(&m, &xb))
        })
        .collect::<Result<Vec<f64>, ConfoundError>>()?;
    let se = sample_sd(&replicates);
    Ok(BootstrapResult { tau, se, replicates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_keys_move_together() {
        let keys = ["a", "b", "a", "c", "b"];
        let g = clusters_by_key(&keys);
        assert_eq!(g, vec![vec![0, 2], vec![1, 4], vec![3]]);
        let w = [1.0, 0.0, 1.0, 0.0, 0.0];
        let units = resample_units(&g, &w, 11, 0).unwrap();
        for grp in &g {
            let hits: Vec<_> = grp.iter().map(|i| units.iter().filter(|&&u| u == *i).count()).collect();
            assert!(hits.windows(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn single_arm_groups_cannot_resample() {
        let g = vec![vec![0, 1]];
        assert!(matches!(resample_units(&g, &[1.0, 1.0], 0, 3), Err(ConfoundError::DegenerateResample { replicate: 3 })));
    }

    #[test]
    fn constant_outcome_gives_zero() {
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.37).sin() });
        let w: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let y = vec![4.2; n];
        let keys: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        let cfg = BootstrapConfig { n_boot: 20, seed: 5, cluster_by_key: true };
        let r = bootstrap_ate(&x, &w, &y, &keys, &PropensityConfig::default(), &cfg).unwrap();
        assert!(r.tau.abs() < 1e-12);
        assert!(r.se < 1e-12);
        let again = bootstrap_ate(&x, &w, &y, &keys, &PropensityConfig::default(), &cfg).unwrap();
        assert_eq!(r, again);
    }
}
