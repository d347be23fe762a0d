//! Confounded synthetic data: the naive contrast is biased, the
//! image-adjusted Hajek estimate is not.
//!
//! cargo run --release --example deconfound -- [n] [seed]

use causal_chips::confound::{analyze_image_confounding, ModelConfig};
use causal_chips::embed::EmbeddingConfig;
use causal_chips::synth::{gen_confounded, oracle_hajek, SynthSpec};
use causal_chips::InMemorySource;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n = args.next().map_or(Ok(2000), |s| s.parse())?;
    let seed = args.next().map_or(Ok(7), |s| s.parse())?;

    let spec = SynthSpec { n_units: n, seed, ..Default::default() };
    let data = gen_confounded(&spec)?;
    let source: InMemorySource = data.chips.iter().cloned().collect();

    let embed = EmbeddingConfig { seed, ..Default::default() };
    let mut config = ModelConfig::default();
    config.bootstrap.seed = seed;
    let t0 = std::time::Instant::now();
    let result = analyze_image_confounding(&data.frame, &source, &embed, &config)?;

    println!("true tau              {:.4}", spec.tau_true[0]);
    println!("difference in means   {:.4}", result.tau_naive);
    println!("hajek, true e         {:.4}", oracle_hajek(&data.frame, &data.e_true));
    println!("hajek, image e-hat    {:.4} (se {:.4})", result.tau_hajek, result.tau_hajek_se);
    println!("cv metrics            nll {:.4}  acc {:.3}  auc {:.3}", result.metrics.nll, result.metrics.acc, result.metrics.auc);
    println!("elapsed               {:.1?}", t0.elapsed());
    Ok(())
}
