//! Randomized-convolution embeddings.
//!
//! Each image is standardized per band, correlated (valid padding, stride 1)
//! with `D` random Gaussian kernels, rectified, and mean pooled, giving one
//! feature per kernel. Image sequences use `t × k × k × C` kernels and pool
//! over time as well as space.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recordstore::RecordError;
use crate::source::ImageSource;
use crate::tensor::{ImageTensor, Layout};

/// Upper bound on conv positions materialized at once per image.
const POSITION_BLOCK: usize = 8192;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("image {height}x{width} is smaller than the {kernel}x{kernel} kernel")]
    ImageTooSmall { height: usize, width: usize, kernel: usize },
    #[error("image has {got} channels, kernel bank expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("sequence has {frames} frames, temporal kernel needs {temporal}")]
    SequenceTooShort { frames: usize, temporal: usize },
    #[error("kernel bank is for {expected}, got {got}")]
    KindMismatch { expected: &'static str, got: &'static str },
    #[error("tensor dims {0:?} are neither an image nor an image sequence")]
    UnsupportedLayout(Vec<usize>),
    #[error("image {key:?} has dims {got:?}, corpus dims are {expected:?}")]
    HeterogeneousDims { key: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("no keys to embed")]
    EmptyInput,
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Source(#[from] RecordError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub n_embed_dim: usize,
    pub kernel_size: usize,
    pub temporal_kernel_size: usize,
    pub seed: u64,
    /// Images fetched per batch in [`embed_corpus`]. Affects memory and
    /// scheduling only, never the output.
    pub batch_size: usize,
    /// Per-band standardization before convolution. Only tests turn this off.
    pub standardize: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { n_embed_dim: 100, kernel_size: 3, temporal_kernel_size: 2, seed: 0, batch_size: 32, standardize: true }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.n_embed_dim == 0 {
            return Err(EmbedError::InvalidConfig("n_embed_dim must be >= 1".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(EmbedError::InvalidConfig(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.temporal_kernel_size == 0 {
            return Err(EmbedError::InvalidConfig("temporal_kernel_size must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `D` kernels stored kernel-major; within a kernel the axes are
/// `(time, row, col, channel)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    dim: usize,
    kernel_size: usize,
    /// `None` for image banks.
    temporal: Option<usize>,
    channels: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    standardize: bool,
}

impl KernelBank {
    /// Builds a bank from explicit weights (`dim × kernel_len`, kernel-major) and zero biases.
    pub fn from_weights(
        weights: Vec<f64>,
        dim: usize,
        kernel_size: usize,
        temporal: Option<usize>,
        channels: usize,
        standardize: bool,
    ) -> Self {
        let len = temporal.unwrap_or(1) * kernel_size * kernel_size * channels;
        assert_eq!(weights.len(), dim * len, "weights length must be dim * kernel_len");
        Self { dim, kernel_size, temporal, channels, weights, biases: vec![0.0; dim], standardize }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn temporal(&self) -> Option<usize> {
        self.temporal
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn biases(&self) -> &[f64] {
        &self.biases
    }
    pub fn standardizes(&self) -> bool {
        self.standardize
    }

    /// Entries per kernel.
    pub fn kernel_len(&self) -> usize {
        self.temporal.unwrap_or(1) * self.kernel_size * self.kernel_size * self.channels
    }

    pub fn kernel(&self, d: usize) -> &[f64] {
        let l = self.kernel_len();
        &self.weights[d * l..(d + 1) * l]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn draw_bank(config: &EmbeddingConfig, channels: usize, temporal: Option<usize>) -> KernelBank {
    assert!(channels >= 1, "kernel bank needs at least one channel");
    let k = config.kernel_size;
    let len = temporal.unwrap_or(1) * k * k * channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights: Vec<f64> = (0..config.n_embed_dim * len).map(|_| StandardNormal.sample(&mut rng)).collect();
    KernelBank::from_weights(weights, config.n_embed_dim, k, temporal, channels, config.standardize)
}

/// Kernel bank for `H × W × C` images.
pub fn make_kernels(config: &EmbeddingConfig, channels: usize) -> KernelBank {
    draw_bank(config, channels, None)
}

/// Kernel bank for `T × H × W × C` sequences.
pub fn make_sequence_kernels(config: &EmbeddingConfig, channels: usize) -> KernelBank {
    draw_bank(config, channels, Some(config.temporal_kernel_size))
}

/// Picks the bank kind matching a tensor's layout.
pub fn make_kernels_for(config: &EmbeddingConfig, tensor: &ImageTensor) -> Result<KernelBank, EmbedError> {
    match tensor.layout() {
        Some(Layout::Image { channels, .. }) => Ok(make_kernels(config, channels)),
        Some(Layout::Sequence { channels, .. }) => Ok(make_sequence_kernels(config, channels)),
        None => Err(EmbedError::UnsupportedLayout(tensor.dims().to_vec())),
    }
}

pub fn embed_image(img: &ImageTensor, bank: &KernelBank) -> Result<Vec<f64>, EmbedError> {
    let Some(Layout::Image { height, width, channels }) = img.layout() else {
        return Err(EmbedError::KindMismatch { expected: "images", got: "a non-image tensor" });
    };
    if bank.temporal.is_some() {
        return Err(EmbedError::KindMismatch { expected: "image sequences", got: "an image" });
    }
    embed_volume(img.data(), 1, height, width, channels, bank)
}

pub fn embed_sequence(seq: &ImageTensor, bank: &KernelBank) -> Result<Vec<f64>, EmbedError> {
    let Some(Layout::Sequence { frames, height, width, channels }) = seq.layout() else {
        return Err(EmbedError::KindMismatch { expected: "image sequences", got: "a non-sequence tensor" });
    };
    let Some(t) = bank.temporal else {
        return Err(EmbedError::KindMismatch { expected: "images", got: "an image sequence" });
    };
    if frames < t {
        return Err(EmbedError::SequenceTooShort { frames, temporal: t });
    }
    embed_volume(seq.data(), frames, height, width, channels, bank)
}

/// Embeds either kind of tensor with a matching bank.
pub fn embed_tensor(t: &ImageTensor, bank: &KernelBank) -> Result<Vec<f64>, EmbedError> {
    match t.layout() {
        Some(Layout::Image { .. }) => embed_image(t, bank),
        Some(Layout::Sequence { .. }) => embed_sequence(t, bank),
        None => Err(EmbedError::UnsupportedLayout(t.dims().to_vec())),
    }
}

/// Per-band standardization over all frames and pixels. A constant band is
/// only centered.
pub fn standardize_bands(data: &[f32], channels: usize) -> Vec<f64> {
    let n = data.len() / channels;
    let mut mean = vec![0.0f64; channels];
    for px in data.chunks_exact(channels) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; channels];
    for px in data.chunks_exact(channels) {
        for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let inv: Vec<f64> = var
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-10 * m.abs().max(1.0) {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    data.chunks_exact(channels)
        .flat_map(|px| px.iter().zip(&mean).zip(&inv).map(|((&v, m), s)| (v as f64 - m) * s))
        .collect()
}

fn embed_volume(data: &[f32], frames: usize, h: usize, w: usize, c: usize, bank: &KernelBank) -> Result<Vec<f64>, EmbedError> {
    let k = bank.kernel_size;
    let t = bank.temporal.unwrap_or(1);
    if c != bank.channels {
        return Err(EmbedError::ChannelMismatch { expected: bank.channels, got: c });
    }
    if h < k || w < k {
        return Err(EmbedError::ImageTooSmall { height: h, width: w, kernel: k });
    }
    let x: Vec<f64> = if bank.standardize { standardize_bands(data, c) } else { data.iter().map(|&v| v as f64).collect() };

    let (out_t, out_h, out_w) = (frames - t + 1, h - k + 1, w - k + 1);
    let positions = out_t * out_h * out_w;
    let len = bank.kernel_len();
    let d = bank.dim;
    let kernels = DMatrix::from_row_slice(d, len, &bank.weights);
    let row_len = k * c;

    let mut sums = vec![0.0f64; d];
    let mut start = 0;
    while start < positions {
        let end = (start + POSITION_BLOCK).min(positions);
        // Column j of `patches` is the flattened receptive field of position start + j.
        let mut patches = DMatrix::<f64>::zeros(len, end - start);
        for (j, pos) in (start..end).enumerate() {
            let (ft, rem) = (pos / (out_h * out_w), pos % (out_h * out_w));
            let (r0, c0) = (rem / out_w, rem % out_w);
            let dst = &mut patches.as_mut_slice()[j * len..(j + 1) * len];
            let mut o = 0;
            for dt in 0..t {
                for dr in 0..k {
                    let src = (((ft + dt) * h + r0 + dr) * w + c0) * c;
                    dst[o..o + row_len].copy_from_slice(&x[src..src + row_len]);
                    o += row_len;
                }
            }
        }
        let resp = &kernels * &patches;
        for j in 0..resp.ncols() {
            for (i, s) in sums.iter_mut().enumerate() {
                let v = resp[(i, j)] + bank.biases[i];
                if v > 0.0 {
                    *s += v;
                }
            }
        }
        start = end;
    }
    Ok(sums.into_iter().map(|s| s / positions as f64).collect())
}

/// Per-unit features, row-aligned with `keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub keys: Vec<String>,
    pub values: DMatrix<f64>,
}

impl EmbeddingMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// `key,f1..fD` header, one row per key.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["key".to_string()];
        header.extend((1..=self.dim()).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for (i, k) in self.keys.iter().enumerate() {
            let mut rec = vec![k.clone()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}

/// Embeds every requested key. Each distinct key is embedded once; repeated
/// keys share the row values.
pub fn embed_corpus<S: ImageSource + ?Sized, K: AsRef<str>>(
    source: &S,
    keys: &[K],
    config: &EmbeddingConfig,
) -> Result<EmbeddingMatrix, EmbedError> {
    embed_corpus_with_bank(source, keys, config).map(|(m, _)| m)
}

/// Like [`embed_corpus`], also returning the kernel bank that was used.
pub fn embed_corpus_with_bank<S: ImageSource + ?Sized, K: AsRef<str>>(
    source: &S,
    keys: &[K],
    config: &EmbeddingConfig,
) -> Result<(EmbeddingMatrix, KernelBank), EmbedError> {
    config.validate()?;
    if keys.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let mut unique: Vec<&str> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let row_slot: Vec<usize> = keys
        .iter()
        .map(|k| {
            let k = k.as_ref();
            *slot.entry(k).or_insert_with(|| {
                unique.push(k);
                unique.len() - 1
            })
        })
        .collect();

    let first = source.fetch(unique[0])?;
    let bank = make_kernels_for(config, &first)?;
    let dims = first.dims().to_vec();
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(unique.len());
    for batch in unique.chunks(config.batch_size) {
        let images = batch
            .iter()
            .map(|&k| {
                let img = source.fetch(k)?;
                if img.dims() != dims.as_slice() {
                    return Err(EmbedError::HeterogeneousDims { key: k.to_string(), expected: dims.clone(), got: img.dims().to_vec() });
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>, EmbedError>>()?;
        let rows = images.par_iter().map(|img| embed_tensor(img, &bank)).collect::<Result<Vec<_>, _>>()?;
        features.extend(rows);
    }

    let d = bank.dim();
    let values = DMatrix::from_fn(keys.len(), d, |i, j| features[row_slot[i]][j]);
    let keys = keys.iter().map(|k| k.as_ref().to_string()).collect();
    Ok((EmbeddingMatrix { keys, values }, bank))
}
