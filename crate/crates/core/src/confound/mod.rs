//! Image-deconfounded average treatment effects.
//!
//! Units are embedded with [`crate::embed`], a ridge logistic propensity model
//! is fit on `[1, x, φ]`, and the effect is the Hajek (self-normalized IPW)
//! contrast. Uncertainty comes from a cluster bootstrap over image keys;
//! out-of-sample fit from stratified cross-validation.

pub mod bootstrap;
pub mod hajek;
pub mod metrics;
pub mod propensity;
pub mod salience;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{embed_corpus_with_bank, EmbedError, EmbeddingConfig, EmbeddingMatrix};
use crate::frame::{CausalFrame, FrameError};
use crate::pgm::write_pgm;
use crate::source::ImageSource;

pub use bootstrap::{bootstrap_ate, BootstrapConfig, BootstrapResult};
pub use hajek::{difference_in_means, hajek_ate, hajek_weights};
pub use metrics::{evaluate_propensity, ModelEvaluationMetrics};
pub use propensity::{fit_propensity, predict_propensity, PropensityConfig, PropensityModel};
pub use salience::{occlusion_map, salience_map, Fill, SalienceGrid};

#[derive(Debug, Error)]
pub enum ConfoundError {
    #[error("propensity fit failed (lambda = {lambda}): {detail}; try a larger ridge penalty")]
    Separation { lambda: f64, detail: String },
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("{units} units is too few, need at least {needed}")]
    TooFewUnits { units: usize, needed: usize },
    #[error("no treated units")]
    NoTreated,
    #[error("no control units")]
    NoControl,
    #[error("bootstrap replicate {replicate} could not draw both arms")]
    DegenerateResample { replicate: usize },
    #[error("image {height}x{width} is smaller than the {patch}-pixel occlusion patch")]
    ImageTooSmall { height: usize, width: usize, patch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceConfig {
    pub patch: usize,
    pub stride: usize,
    pub fill: Fill,
    /// Maps are produced for the first `max_units` distinct image keys.
    pub max_units: usize,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        Self { patch: 8, stride: 4, fill: Fill::BandMean, max_units: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub propensity: PropensityConfig,
    pub folds: usize,
    pub bootstrap: BootstrapConfig,
    pub salience: Option<SalienceConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { propensity: PropensityConfig::default(), folds: 5, bootstrap: BootstrapConfig::default(), salience: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitSalience {
    pub key: String,
    pub unit: usize,
    pub grid: SalienceGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfoundingResult {
    #[serde(rename = "tauHat_propensityHajek")]
    pub tau_hajek: f64,
    #[serde(rename = "tauHat_propensityHajek_se")]
    pub tau_hajek_se: f64,
    #[serde(rename = "tauHat_diffInMeans")]
    pub tau_naive: f64,
    pub metrics: ModelEvaluationMetrics,
    pub ehat: Vec<f64>,
    #[serde(skip)]
    pub bootstrap_replicates: Vec<f64>,
    #[serde(skip)]
    pub model: PropensityModel,
    #[serde(skip)]
    pub salience: Vec<UnitSalience>,
}

/// `[1, x, φ]`, one row per unit.
pub fn design_matrix(x: &DMatrix<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = phi.nrows();
    assert_eq!(x.nrows(), n, "covariate and embedding rows differ");
    let (p, d) = (x.ncols(), phi.ncols());
    DMatrix::from_fn(n, 1 + p + d, |i, j| match j {
        0 => 1.0,
        j if j <= p => x[(i, j - 1)],
        j => phi[(i, j - 1 - p)],
    })
}

/// Runs the full pipeline on precomputed embeddings (no salience maps).
pub fn analyze_embeddings(frame: &CausalFrame, phi: &EmbeddingMatrix, config: &ModelConfig) -> Result<ConfoundingResult, ConfoundError> {
    if phi.nrows() != frame.len() {
        return Err(ConfoundError::DegenerateFeatures(format!("{} embedding rows for {} units", phi.nrows(), frame.len())));
    }
    let features = design_matrix(&frame.x, &phi.values);
    let model = fit_propensity(&features, &frame.w, &config.propensity)?;
    let ehat = predict_propensity(&model, &features);
    let metrics = evaluate_propensity(&features, &frame.w, config.folds, config.bootstrap.seed, &config.propensity)?;
    let boot = bootstrap_ate(&features, &frame.w, &frame.y, &frame.keys, &config.propensity, &config.bootstrap)?;
    let tau_naive = difference_in_means(&frame.w, &frame.y)?;
    log::info!("hajek tau = {:.4} (se {:.4}), naive = {:.4}, cv auc = {:.3}", boot.tau, boot.se, tau_naive, metrics.auc);
    Ok(ConfoundingResult {
        tau_hajek: boot.tau,
        tau_hajek_se: boot.se,
        tau_naive,
        metrics,
        ehat,
        bootstrap_replicates: boot.replicates,
        model,
        salience: Vec::new(),
    })
}

/// Embeds the frame's images, then estimates the image-adjusted ATE, its
/// bootstrap standard error, cross-validated model metrics and (optionally)
/// occlusion salience maps.
pub fn analyze_image_confounding<S: ImageSource + ?Sized>(
    frame: &CausalFrame,
    source: &S,
    embed_config: &EmbeddingConfig,
    config: &ModelConfig,
) -> Result<ConfoundingResult, ConfoundError> {
    let (phi, bank) = embed_corpus_with_bank(source, &frame.keys, embed_config)?;
    let mut result = analyze_embeddings(frame, &phi, config)?;
    if let Some(sc) = &config.salience {
        let mut seen = std::collections::HashSet::new();
        for (i, key) in frame.keys.iter().enumerate() {
            if result.salience.len() >= sc.max_units {
                break;
            }
            if !seen.insert(key.as_str()) {
                continue;
            }
            let img = source.fetch(key).map_err(EmbedError::from)?;
            let tabular: Vec<f64> = frame.x.row(i).iter().copied().collect();
            let grid = salience_map(&img, &bank, &result.model, &tabular, sc.patch, sc.stride, sc.fill)?;
            result.salience.push(UnitSalience { key: key.clone(), unit: i, grid });
        }
    }
    Ok(result)
}

/// Writes `salience_{tag}_{key}.csv` and `.pgm` per mapped unit.
pub fn write_salience(maps: &[UnitSalience], out_dir: &Path, tag: &str) -> std::io::Result<()> {
    fs::create_dir_all(out_dir)?;
    for m in maps {
        let stem = if tag.is_empty() { format!("salience_{}", m.key) } else { format!("salience_{tag}_{}", m.key) };
        m.grid.write_csv(fs::File::create(out_dir.join(format!("{stem}.csv")))?)?;
        write_pgm(&m.grid.values, m.grid.rows, m.grid.cols, fs::File::create(out_dir.join(format!("{stem}.pgm")))?)?;
    }
    Ok(())
}
