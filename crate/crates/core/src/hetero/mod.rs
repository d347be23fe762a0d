//! Treatment-effect heterogeneity driven by images.
//!
//! Units fall into `K` latent effect clusters, each with its own treatment
//! effect; cluster membership probabilities come from the image embedding
//! through a softmax gate. Clusters are reported sorted by effect size.

pub mod em;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confound::bootstrap::{clusters_by_key, resample_units};
use crate::confound::salience::{occlusion_map, SalienceGrid};
use crate::confound::{ConfoundError, SalienceConfig, UnitSalience};
use crate::embed::{embed_corpus_with_bank, EmbedError, EmbeddingConfig, EmbeddingMatrix};
use crate::frame::{CausalFrame, FrameError, RawFrame};
use crate::linalg::{quantile, sample_sd, ColumnScaler};
use crate::source::ImageSource;

use em::{gate_probs, initial_params, run_em, EmData, EmOutcome, EmParams, EmSettings};

#[derive(Debug, Error)]
pub enum HeteroError {
    #[error("effect cluster {cluster} emptied out (after {restarts} restarts)")]
    EmptyCluster { cluster: usize, restarts: usize },
    #[error("EM did not converge in {iterations} iterations (last log-likelihood change {loglik_change:.3e}, gate gradient norm {gate_grad_norm:.3e})")]
    NonConvergence { iterations: usize, loglik_change: f64, gate_grad_norm: f64 },
    #[error("every unit was dropped for missing values")]
    AllDropped,
    #[error("{units} units cannot support {clusters} clusters")]
    TooFewUnits { units: usize, clusters: usize },
    #[error("expected {expected} feature columns, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Confound(#[from] ConfoundError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityConfig {
    pub k_clusters: usize,
    pub max_em_iters: usize,
    /// Relative change of the penalized log-likelihood that ends EM.
    pub tol: f64,
    pub n_boot: usize,
    pub seed: u64,
    /// Ridge on standardized, non-intercept gate coefficients.
    pub gate_lambda: f64,
    /// Lower quantile reported as `clusterProbs_lowerConf`.
    pub conf_level: f64,
    pub max_restarts: usize,
    pub gate_newton_steps: usize,
    pub cluster_by_key: bool,
}

impl Default for HeterogeneityConfig {
    fn default() -> Self {
        Self {
            k_clusters: 2,
            max_em_iters: 2000,
            tol: 1e-9,
            n_boot: 200,
            seed: 0,
            gate_lambda: 1.0,
            conf_level: 0.05,
            max_restarts: 5,
            gate_newton_steps: 2,
            cluster_by_key: true,
        }
    }
}

impl HeterogeneityConfig {
    fn settings(&self) -> EmSettings {
        EmSettings { max_iters: self.max_em_iters, tol: self.tol, gate_lambda: self.gate_lambda, gate_newton_steps: self.gate_newton_steps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityFit {
    /// Cluster effects, ascending.
    pub tau_k: Vec<f64>,
    pub tau_k_sd: Option<Vec<f64>>,
    pub pi_mean: Vec<f64>,
    pub pi_sd: Option<Vec<f64>>,
    pub pi_lower: Option<Vec<f64>>,
    /// `K × (1 + D)` gate coefficients on standardized embeddings; last row zero.
    pub theta: DMatrix<f64>,
    pub gate_scaler: ColumnScaler,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    /// Posterior cluster probabilities, `N × K`.
    pub resp: DMatrix<f64>,
    /// Prior (image-only) cluster probabilities, `N × K`.
    pub gate: DMatrix<f64>,
    pub implied_ate: f64,
    pub individual_tau: Vec<f64>,
    pub dropped: Vec<usize>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub n_boot_ok: usize,
}

impl HeterogeneityFit {
    pub fn k(&self) -> usize {
        self.tau_k.len()
    }

    /// Cluster with the largest posterior probability for each unit.
    pub fn modal_cluster(&self) -> Vec<usize> {
        (0..self.resp.nrows()).map(|i| self.resp.row(i).transpose().argmax().0).collect()
    }

    /// Gate probabilities for raw embedding rows.
    pub fn gate_for(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>, HeteroError> {
        let d = self.theta.ncols() - 1;
        if phi.ncols() != d {
            return Err(HeteroError::DimMismatch { expected: d, got: phi.ncols() });
        }
        Ok(gate_probs(&gate_design(phi, &self.gate_scaler), &self.theta))
    }
}

/// `[1, (φ − center) / scale]`.
fn gate_design(phi: &DMatrix<f64>, scaler: &ColumnScaler) -> DMatrix<f64> {
    let z = scaler.apply(phi);
    DMatrix::from_fn(phi.nrows(), phi.ncols() + 1, |i, j| if j == 0 { 1.0 } else { z[(i, j - 1)] })
}

/// `mean_i Σ_k resp_ik τ_k`.
pub fn implied_ate(fit: &HeterogeneityFit) -> f64 {
    let n = fit.resp.nrows();
    let s: f64 = (0..n).map(|i| (0..fit.k()).map(|c| fit.resp[(i, c)] * fit.tau_k[c]).sum::<f64>()).sum();
    s / n as f64
}

/// Cluster probabilities for units outside the sample, from their images alone.
pub fn transportability(fit: &HeterogeneityFit, new_phi: &DMatrix<f64>) -> Result<DMatrix<f64>, HeteroError> {
    fit.gate_for(new_phi)
}

/// Drops units with a missing treatment, outcome, covariate or key, or whose
/// key `resolvable` rejects. Returns the clean frame and the original indices
/// of dropped units.
pub fn drop_na(frame: &RawFrame, resolvable: impl Fn(&str) -> bool) -> Result<(CausalFrame, Vec<usize>), HeteroError> {
    let complete: HashSet<usize> = frame.complete_rows().into_iter().collect();
    let keep: Vec<usize> = (0..frame.len())
        .filter(|i| complete.contains(i) && frame.keys[*i].as_deref().is_some_and(&resolvable))
        .collect();
    if keep.is_empty() {
        return Err(HeteroError::AllDropped);
    }
    let dropped: Vec<usize> = (0..frame.len()).filter(|i| !keep.contains(i)).collect();
    let (clean, _) = frame.select_complete(&keep)?;
    Ok((clean, dropped))
}

/// Sorts clusters by effect and re-references the gate to the last cluster.
fn canonicalize(out: EmOutcome) -> EmOutcome {
    let k = out.params.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| out.params.tau[a].total_cmp(&out.params.tau[b]));
    let tau = order.iter().map(|&c| out.params.tau[c]).collect();
    let mut theta = out.params.theta.select_rows(order.iter());
    let last = theta.row(k - 1).clone_owned();
    for mut row in theta.row_iter_mut() {
        row -= &last;
    }
    EmOutcome {
        params: EmParams { tau, theta, ..out.params },
        resp: out.resp.select_columns(order.iter()),
        gate: out.gate.select_columns(order.iter()),
        ..out
    }
}

fn fit_with_restarts(data: &EmData, config: &HeterogeneityConfig, warm: Option<EmParams>) -> Result<(EmOutcome, usize), HeteroError> {
    let k = config.k_clusters;
    let mut last_err = None;
    let starts = warm.into_iter().map(Ok).chain((0..=config.max_restarts).map(|r| {
        initial_params(data, k, config.seed, r).ok_or(HeteroError::EmptyCluster { cluster: 0, restarts: r })
    }));
    for (attempt, init) in starts.enumerate() {
        match init.and_then(|p| run_em(data, p, &config.settings())) {
            Ok(out) => return Ok((canonicalize(out), attempt)),
            Err(HeteroError::EmptyCluster { cluster, .. }) => {
                log::debug!("cluster {cluster} emptied on start {attempt}; restarting");
                last_err = Some(HeteroError::EmptyCluster { cluster, restarts: attempt });
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(HeteroError::EmptyCluster { cluster: 0, restarts: config.max_restarts }))
}

/// Fits the effect-cluster mixture by EM, then bootstraps cluster effects and
/// cluster shares. `keys` groups units that share an image for the bootstrap.
pub fn fit_effect_clusters<S: AsRef<str> + Sync>(
    phi: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &[f64],
    y: &[f64],
    keys: &[S],
    config: &HeterogeneityConfig,
) -> Result<HeterogeneityFit, HeteroError> {
    let n = y.len();
    let k = config.k_clusters;
    if k == 0 {
        return Err(HeteroError::InvalidConfig("k_clusters must be >= 1".into()));
    }
    if !(config.tol > 0.0) {
        return Err(HeteroError::InvalidConfig("tol must be > 0".into()));
    }
    if !(0.0..0.5).contains(&config.conf_level) {
        return Err(HeteroError::InvalidConfig(format!("conf_level must lie in [0, 0.5), got {}", config.conf_level)));
    }
    for (name, len) in [("w", w.len()), ("phi", phi.nrows()), ("x", x.nrows()), ("keys", keys.len())] {
        if len != n {
            return Err(HeteroError::Frame(FrameError::LengthMismatch { column: name.into(), expected: n, got: len }));
        }
    }
    if n <= k {
        return Err(HeteroError::TooFewUnits { units: n, clusters: k });
    }
    if !w.contains(&1.0) {
        return Err(FrameError::NoTreated.into());
    }
    if !w.contains(&0.0) {
        return Err(FrameError::NoControl.into());
    }

    let gate_scaler = ColumnScaler::fit(phi, false);
    let data = EmData {
        y: y.to_vec(),
        w: w.to_vec(),
        u: DMatrix::from_fn(n, 1 + x.ncols(), |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] }),
        g: gate_design(phi, &gate_scaler),
    };
    let (out, restarts) = fit_with_restarts(&data, config, None)?;

    let mut tau_k_sd = None;
    let mut pi_sd = None;
    let mut pi_lower = None;
    let mut n_boot_ok = 0;
    if config.n_boot > 0 {
        let groups = if config.cluster_by_key { clusters_by_key(keys) } else { (0..n).map(|i| vec![i]).collect() };
        let warm = out.params.clone();
        let reps: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..config.n_boot)
            .into_par_iter()
            .map(|r| {
                let units = resample_units(&groups, w, config.seed, r).ok()?;
                let sub = data.subset(&units);
                match fit_with_restarts(&sub, config, Some(warm.clone())) {
                    Ok((o, _)) => {
                        let shares = (0..k).map(|c| o.resp.column(c).mean()).collect();
                        Some((o.params.tau, shares))
                    }
                    Err(e) => {
                        log::warn!("bootstrap replicate {r} failed: {e}");
                        None
                    }
                }
            })
            .collect();
        let ok: Vec<_> = reps.into_iter().flatten().collect();
        n_boot_ok = ok.len();
        if ok.len() >= 2 {
            let col = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
            tau_k_sd = Some((0..k).map(|c| sample_sd(&col(&|r| r.0[c]))).collect());
            pi_sd = Some((0..k).map(|c| sample_sd(&col(&|r| r.1[c]))).collect());
            pi_lower = Some((0..k).map(|c| quantile(&col(&|r| r.1[c]), config.conf_level)).collect());
        }
    }

    let individual_tau: Vec<f64> = (0..n).map(|i| (0..k).map(|c| out.resp[(i, c)] * out.params.tau[c]).sum()).collect();
    let implied = individual_tau.iter().sum::<f64>() / n as f64;
    Ok(HeterogeneityFit {
        tau_k: out.params.tau.clone(),
        tau_k_sd,
        pi_mean: (0..k).map(|c| out.resp.column(c).mean()).collect(),
        pi_sd,
        pi_lower,
        theta: out.params.theta.clone(),
        gate_scaler,
        alpha: out.params.coef[0],
        beta: out.params.coef[1..].to_vec(),
        sigma2: out.params.sigma2,
        resp: out.resp,
        gate: out.gate,
        implied_ate: implied,
        individual_tau,
        dropped: Vec::new(),
        loglik_trace: out.trace,
        iterations: out.iterations,
        restarts,
        n_boot_ok,
    })
}

/// Top units per cluster by gate probability, one entry per distinct key.
pub fn exemplars(fit: &HeterogeneityFit, keys: &[String], top: usize) -> Vec<Vec<(String, f64)>> {
    (0..fit.k())
        .map(|c| {
            let mut idx: Vec<usize> = (0..keys.len()).collect();
            idx.sort_by(|&a, &b| fit.gate[(b, c)].total_cmp(&fit.gate[(a, c)]).then(a.cmp(&b)));
            let mut seen = HashSet::new();
            idx.into_iter().filter(|&i| seen.insert(keys[i].as_str())).take(top).map(|i| (keys[i].clone(), fit.gate[(i, c)])).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeterogeneityReport {
    #[serde(rename = "clusterTaus_mean")]
    pub cluster_taus_mean: Vec<f64>,
    #[serde(rename = "clusterTaus_sd")]
    pub cluster_taus_sd: Option<Vec<f64>>,
    #[serde(rename = "clusterProbs_mean")]
    pub cluster_probs_mean: Vec<f64>,
    #[serde(rename = "clusterProbs_sd")]
    pub cluster_probs_sd: Option<Vec<f64>>,
    #[serde(rename = "clusterProbs_lowerConf")]
    pub cluster_probs_lower_conf: Option<Vec<f64>>,
    #[serde(rename = "impliedATE")]
    pub implied_ate: f64,
    #[serde(rename = "individualTau_est")]
    pub individual_tau_est: Vec<f64>,
    #[serde(rename = "whichNA_dropped")]
    pub which_na_dropped: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transportability: Option<Vec<Vec<f64>>>,
}

impl HeterogeneityReport {
    pub fn new(fit: &HeterogeneityFit, transport: Option<&DMatrix<f64>>) -> Self {
        Self {
            cluster_taus_mean: fit.tau_k.clone(),
            cluster_taus_sd: fit.tau_k_sd.clone(),
            cluster_probs_mean: fit.pi_mean.clone(),
            cluster_probs_sd: fit.pi_sd.clone(),
            cluster_probs_lower_conf: fit.pi_lower.clone(),
            implied_ate: fit.implied_ate,
            individual_tau_est: fit.individual_tau.clone(),
            which_na_dropped: fit.dropped.clone(),
            transportability: transport.map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeterogeneityAnalysis {
    pub fit: HeterogeneityFit,
    pub frame: CausalFrame,
    pub embeddings: EmbeddingMatrix,
    pub exemplars: Vec<Vec<(String, f64)>>,
    pub salience: Vec<UnitSalience>,
}

/// Drops incomplete units, embeds images, fits effect clusters and collects
/// per-cluster exemplars and (optionally) salience maps of each mapped unit's
/// modal-cluster gate probability.
pub fn analyze_image_heterogeneity<S: ImageSource + ?Sized>(
    frame: &RawFrame,
    source: &S,
    embed_config: &EmbeddingConfig,
    config: &HeterogeneityConfig,
    salience: Option<&SalienceConfig>,
) -> Result<HeterogeneityAnalysis, HeteroError> {
    let (clean, dropped) = drop_na(frame, |k| source.contains(k))?;
    if !dropped.is_empty() {
        log::info!("dropped {} units with missing values", dropped.len());
    }
    let (phi, bank) = embed_corpus_with_bank(source, &clean.keys, embed_config)?;
    let mut fit = fit_effect_clusters(&phi.values, &clean.x, &clean.w, &clean.y, &clean.keys, config)?;
    fit.dropped = dropped;
    log::info!("cluster effects {:?}, implied ATE {:.4}", fit.tau_k, fit.implied_ate);
    let ex = exemplars(&fit, &clean.keys, 10);

    let mut maps = Vec::new();
    if let Some(sc) = salience {
        let modal = fit.modal_cluster();
        let mut seen = HashSet::new();
        for (i, key) in clean.keys.iter().enumerate() {
            if maps.len() >= sc.max_units {
                break;
            }
            if !seen.insert(key.as_str()) {
                continue;
            }
            let img = source.fetch(key).map_err(EmbedError::from)?;
            let c = modal[i];
            let grid: SalienceGrid = occlusion_map(&img, &bank, sc.patch, sc.stride, sc.fill, |phi_row| {
                let m = DMatrix::from_row_slice(1, phi_row.len(), phi_row);
                fit.gate_for(&m).map(|g| g[(0, c)]).unwrap_or(f64::NAN)
            })?;
            maps.push(UnitSalience { key: key.clone(), unit: i, grid });
        }
    }
    Ok(HeterogeneityAnalysis { fit, frame: clean, embeddings: phi, exemplars: ex, salience: maps })
}

/// Writes `cluster{k}_exemplars.csv` (1-based `k`), highest gate probability first.
pub fn write_exemplars(ex: &[Vec<(String, f64)>], out_dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(out_dir)?;
    for (c, list) in ex.iter().enumerate() {
        let mut w = csv::Writer::from_path(out_dir.join(format!("cluster{}_exemplars.csv", c + 1)))?;
        w.write_record(["key", "gate_probability"])?;
        for (k, p) in list {
            w.write_record([k.clone(), p.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}
