//! Embeddings of image sequences with a spatio-temporal kernel: a scene that
//! changes over time versus one that stays the same.
//!
//! cargo run --release --example embed_sequences -- [frames] [temporal_kernel]

use causal_chips::embed::{embed_sequence, make_sequence_kernels, EmbeddingConfig};
use causal_chips::synth::landscape_chip;
use causal_chips::ImageTensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let frames: usize = args.next().map_or(Ok(6), |s| s.parse())?;
    let temporal: usize = args.next().map_or(Ok(2), |s| s.parse())?;
    let cfg = EmbeddingConfig { n_embed_dim: 32, temporal_kernel_size: temporal, seed: 5, ..Default::default() };
    let bank = make_sequence_kernels(&cfg, 1);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let still = landscape_chip(24, 1, 0.4, &mut rng);
    let static_seq = ImageTensor::stack_frames(&vec![still.clone(); frames])?;
    // Lit area grows from 20% to 80% of the scene.
    let growing: Vec<ImageTensor> = (0..frames).map(|t| landscape_chip(24, 1, 0.2 + 0.6 * t as f64 / (frames - 1).max(1) as f64, &mut rng)).collect();
    let growing_seq = ImageTensor::stack_frames(&growing)?;
    println!("sequence tensor dims {:?}", growing_seq.dims());

    let a = embed_sequence(&static_seq, &bank)?;
    let b = embed_sequence(&growing_seq, &bank)?;
    let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    println!("static  first features {:?}", a[..4].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    println!("growing first features {:?}", b[..4].iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    println!("distance between the two sequences: {dist:.4}");
    Ok(())
}
