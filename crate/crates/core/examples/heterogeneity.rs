//! Two latent effect clusters driven by image brightness; recover the
//! cluster effects, memberships and out-of-sample cluster probabilities.
//!
//! cargo run --release --example heterogeneity -- [n] [seed] [nboot]

use causal_chips::embed::{embed_corpus, EmbeddingConfig};
use causal_chips::hetero::{fit_effect_clusters, transportability, HeterogeneityConfig};
use causal_chips::synth::{gen_heterogeneous, SynthSpec};
use causal_chips::InMemorySource;

const HELD_OUT: usize = 200;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(Ok(2000), |s| s.parse())?;
    let seed: u64 = args.next().map_or(Ok(7), |s| s.parse())?;
    let n_boot: usize = args.next().map_or(Ok(20), |s| s.parse())?;

    let spec = SynthSpec { n_units: n + HELD_OUT, tau_true: vec![1.0, 3.0], seed, ..Default::default() };
    let data = gen_heterogeneous(&spec)?;
    let labels = data.cluster_labels.clone().expect("hetero design has labels");
    let source: InMemorySource = data.chips.iter().cloned().collect();
    let keys = &data.frame.keys;

    let t0 = std::time::Instant::now();
    let embed = EmbeddingConfig { seed, ..Default::default() };
    let phi = embed_corpus(&source, &keys[..n], &embed)?;
    let cfg = HeterogeneityConfig { n_boot, seed, ..Default::default() };
    let f = &data.frame;
    let x = f.x.rows(0, n).clone_owned();
    let fit = fit_effect_clusters(&phi.values, &x, &f.w[..n], &f.y[..n], &keys[..n], &cfg)?;

    let modal = fit.modal_cluster();
    let acc = modal.iter().zip(&labels[..n]).filter(|(a, b)| a == b).count() as f64 / n as f64;
    let held = embed_corpus(&source, &keys[n..], &embed)?;
    let probs = transportability(&fit, &held.values)?;
    let confident = (0..HELD_OUT).filter(|&i| probs[(i, labels[n + i])] >= 0.8).count() as f64 / HELD_OUT as f64;

    println!("cluster taus          {:?} (sd {:?})", fit.tau_k, fit.tau_k_sd);
    println!("cluster shares        {:?} (lower {:?})", fit.pi_mean, fit.pi_lower);
    println!("implied ATE           {:.4}", fit.implied_ate);
    println!("modal accuracy        {:.3}", acc);
    println!("held-out p>=0.8 share {:.3}", confident);
    println!("EM iterations         {} (restarts {}, bootstrap ok {}/{})", fit.iterations, fit.restarts, fit.n_boot_ok, n_boot);
    println!("elapsed               {:.1?}", t0.elapsed());
    Ok(())
}
