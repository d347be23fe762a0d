//! Which parts of an image drive the estimated treatment probability?
//! Fits the image propensity model on confounded synthetic data and writes
//! occlusion maps for a few units as CSV and PGM.
//!
//! cargo run --release --example salience -- [out_dir] [n]

use std::fs::File;
use std::path::PathBuf;

use causal_chips::confound::{design_matrix, fit_propensity, salience_map, Fill, PropensityConfig};
use causal_chips::embed::{embed_corpus, make_kernels, EmbeddingConfig};
use causal_chips::pgm::write_pgm;
use causal_chips::synth::{gen_confounded, SynthSpec};
use causal_chips::{ImageSource, InMemorySource};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().map_or_else(|| std::env::temp_dir().join("causal-chips-salience"), PathBuf::from);
    let n: usize = args.next().map_or(Ok(600), |s| s.parse())?;
    std::fs::create_dir_all(&out)?;

    let data = gen_confounded(&SynthSpec { n_units: n, seed: 3, ..Default::default() })?;
    let source: InMemorySource = data.chips.iter().cloned().collect();
    let cfg = EmbeddingConfig { n_embed_dim: 64, seed: 3, ..Default::default() };
    let phi = embed_corpus(&source, &data.frame.keys, &cfg)?;
    let model = fit_propensity(&design_matrix(&data.frame.x, &phi.values), &data.frame.w, &PropensityConfig::default())?;
    let bank = make_kernels(&cfg, 1);

    for i in 0..4 {
        let key = &data.frame.keys[i];
        let img = &source.fetch(key)?;
        let grid = salience_map(img, &bank, &model, &[], 8, 4, Fill::BandMean)?;
        let (r, c) = grid.argmax();
        let (row0, col0, size) = grid.cell_window(r, c);
        println!("{key}: brightness {:.2}, {}x{} grid, strongest patch at rows {row0}..{} cols {col0}..{}", data.brightness[i], grid.rows, grid.cols, row0 + size, col0 + size);
        grid.write_csv(File::create(out.join(format!("salience_{key}.csv")))?)?;
        write_pgm(&grid.values, grid.rows, grid.cols, File::create(out.join(format!("salience_{key}.pgm")))?)?;
    }
    println!("maps written to {}", out.display());
    Ok(())
}
