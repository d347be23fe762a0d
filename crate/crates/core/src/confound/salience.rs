//! Occlusion salience: how much a prediction moves when a patch of the image
//! is blanked out.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::propensity::PropensityModel;
use super::ConfoundError;
use crate::embed::{embed_image, KernelBank};
use crate::tensor::{ImageTensor, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fill {
    /// Per-band mean of the image being occluded.
    BandMean,
    Constant(f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, one value per occlusion position.
    pub values: Vec<f64>,
    pub patch: usize,
    pub stride: usize,
}

impl SalienceGrid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Grid cell with the largest value (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }

    /// Pixel rectangle `(row0, col0, size)` covered by grid cell `(r, c)`.
    pub fn cell_window(&self, r: usize, c: usize) -> (usize, usize, usize) {
        (r * self.stride, c * self.stride, self.patch)
    }

    /// One line per grid row.
    pub fn write_csv(&self, out: impl std::io::Write) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for r in 0..self.rows {
            w.write_record(self.values[r * self.cols..(r + 1) * self.cols].iter().map(|v| v.to_string()))?;
        }
        w.flush()
    }
}

/// Occlusion map of an arbitrary scalar `target(φ)` of the image embedding:
/// each cell holds `|target(φ_occluded) − target(φ)|`.
pub fn occlusion_map<F>(img: &ImageTensor, bank: &KernelBank, patch: usize, stride: usize, fill: Fill, target: F) -> Result<SalienceGrid, ConfoundError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let Some(Layout::Image { height, width, channels }) = img.layout() else {
        return Err(ConfoundError::InvalidConfig(format!("salience needs an image, got dims {:?}", img.dims())));
    };
    if patch == 0 || stride == 0 {
        return Err(ConfoundError::InvalidConfig("patch and stride must be >= 1".into()));
    }
    if patch > height.min(width) {
        return Err(ConfoundError::ImageTooSmall { height, width, patch });
    }
    let fill_values: Vec<f32> = match fill {
        Fill::Constant(v) => vec![v; channels],
        Fill::BandMean => {
            let mut m = vec![0.0f64; channels];
            for px in img.data().chunks_exact(channels) {
                m.iter_mut().zip(px).for_each(|(m, &v)| *m += v as f64);
            }
            m.iter().map(|s| (s / (height * width) as f64) as f32).collect()
        }
    };
    let base = target(&embed_image(img, bank)?);
    let rows = (height - patch) / stride + 1;
    let cols = (width - patch) / stride + 1;
    let values = (0..rows * cols)
        .into_par_iter()
        .map(|cell| {
            let (r0, c0) = ((cell / cols) * stride, (cell % cols) * stride);
            let mut occluded = img.clone();
            let data = occluded.data_mut();
            for r in r0..r0 + patch {
                for c in c0..c0 + patch {
                    let o = (r * width + c) * channels;
                    data[o..o + channels].copy_from_slice(&fill_values);
                }
            }
            Ok((target(&embed_image(&occluded, bank)?) - base).abs())
        })
        .collect::<Result<Vec<f64>, ConfoundError>>()?;
    Ok(SalienceGrid { rows, cols, values, patch, stride })
}

/// Occlusion salience of the predicted treatment probability. `tabular` is
/// the unit's covariate row; the model sees `[1, tabular, φ]`.
pub fn salience_map(
    img: &ImageTensor,
    bank: &KernelBank,
    model: &PropensityModel,
    tabular: &[f64],
    patch: usize,
    stride: usize,
    fill: Fill,
) -> Result<SalienceGrid, ConfoundError> {
    let expected = 1 + tabular.len() + bank.dim();
    if model.coefficients.len() != expected {
        return Err(ConfoundError::DegenerateFeatures(format!(
            "model has {} coefficients, feature layout has {expected}",
            model.coefficients.len()
        )));
    }
    occlusion_map(img, bank, patch, stride, fill, |phi| {
        let mut row = Vec::with_capacity(expected);
        row.push(1.0);
        row.extend_from_slice(tabular);
        row.extend_from_slice(phi);
        model.probability_row(&row)
    })
}
