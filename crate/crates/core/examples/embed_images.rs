//! Randomized-convolution embeddings of a small corpus. Shows that the
//! features ignore per-band brightness and contrast, and that they are the
//! same whatever the thread count.
//!
//! cargo run --release --example embed_images -- [dim] [kernel]

use causal_chips::embed::{embed_corpus, embed_image, make_kernels, EmbeddingConfig};
use causal_chips::synth::landscape_chip;
use causal_chips::{ImageSource, ImageTensor, InMemorySource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().map_or(Ok(64), |s| s.parse())?;
    let kernel: usize = args.next().map_or(Ok(3), |s| s.parse())?;
    let cfg = EmbeddingConfig { n_embed_dim: dim, kernel_size: kernel, seed: 11, ..Default::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let keys: Vec<String> = (0..8).map(|i| format!("chip{i}")).collect();
    let source: InMemorySource = keys.iter().enumerate().map(|(i, k)| (k.clone(), landscape_chip(32, 3, i as f64 / 8.0, &mut rng))).collect();

    let phi = embed_corpus(&source, &keys, &cfg)?;
    println!("{} x {} embedding matrix", phi.nrows(), phi.dim());
    for (i, k) in keys.iter().enumerate() {
        let row = phi.row(i);
        let (lo, hi) = row.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!("  {k}: mean feature {:.4}, range {lo:.4}..{hi:.4}", row.iter().sum::<f64>() / dim as f64);
    }

    let bank = make_kernels(&cfg, 3);
    let img = &source.fetch("chip3")?;
    let brighter = ImageTensor::from_fn(32, 32, 3, |r, c, b| img.pixel(r, c, b) * [2.0, 0.5, 4.0][b] + [10.0, -1.0, 3.0][b]);
    let diff = embed_image(img, &bank)?.iter().zip(embed_image(&brighter, &bank)?).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max change under per-band affine rescaling: {diff:.2e}");

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build()?.install(|| embed_corpus(&source, &keys, &cfg))?;
    println!("one thread reproduces the parallel result bit for bit: {}", single == phi);
    Ok(())
}
