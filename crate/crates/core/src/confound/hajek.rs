//! Self-normalized inverse-propensity-weighted contrast.

use super::ConfoundError;

/// Normalized weights within each arm: treated units get `(1/ê) / Σ_treated (1/ê)`,
/// controls `(1/(1−ê)) / Σ_control (1/(1−ê))`.
pub fn hajek_weights(w: &[f64], ehat: &[f64]) -> Result<Vec<f64>, ConfoundError> {
    check(w, ehat)?;
    let treated: f64 = w.iter().zip(ehat).filter(|(w, _)| **w == 1.0).map(|(_, e)| 1.0 / e).sum();
    let control: f64 = w.iter().zip(ehat).filter(|(w, _)| **w == 0.0).map(|(_, e)| 1.0 / (1.0 - e)).sum();
    Ok(w.iter().zip(ehat).map(|(&w, &e)| if w == 1.0 { 1.0 / e / treated } else { 1.0 / (1.0 - e) / control }).collect())
}

fn check(w: &[f64], ehat: &[f64]) -> Result<(), ConfoundError> {
    if w.len() != ehat.len() {
        return Err(ConfoundError::DegenerateFeatures(format!("{} treatments for {} propensities", w.len(), ehat.len())));
    }
    if let Some(e) = ehat.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(ConfoundError::InvalidConfig(format!("propensity {e} outside (0, 1)")));
    }
    if !w.contains(&1.0) {
        return Err(ConfoundError::NoTreated);
    }
    if !w.contains(&0.0) {
        return Err(ConfoundError::NoControl);
    }
    Ok(())
}

/// `Σ w y/ê ⁄ Σ w/ê  −  Σ (1−w) y/(1−ê) ⁄ Σ (1−w)/(1−ê)`.
pub fn hajek_ate(w: &[f64], y: &[f64], ehat: &[f64]) -> Result<f64, ConfoundError> {
    check(w, ehat)?;
    if y.len() != w.len() {
        return Err(ConfoundError::DegenerateFeatures(format!("{} outcomes for {} units", y.len(), w.len())));
    }
    let (mut t_num, mut t_den, mut c_num, mut c_den) = (0.0, 0.0, 0.0, 0.0);
    for ((&w, &y), &e) in w.iter().zip(y).zip(ehat) {
        if w == 1.0 {
            t_num += y / e;
            t_den += 1.0 / e;
        } else {
            c_num += y / (1.0 - e);
            c_den += 1.0 / (1.0 - e);
        }
    }
    Ok(t_num / t_den - c_num / c_den)
}

/// Plain difference in arm means.
pub fn difference_in_means(w: &[f64], y: &[f64]) -> Result<f64, ConfoundError> {
    let (mut t, mut nt, mut c, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (&w, &y) in w.iter().zip(y) {
        if w == 1.0 {
            t += y;
            nt += 1;
        } else {
            c += y;
            nc += 1;
        }
    }
    if nt == 0 {
        return Err(ConfoundError::NoTreated);
    }
    if nc == 0 {
        return Err(ConfoundError::NoControl);
    }
    Ok(t / nt as f64 - c / nc as f64)
}
