//! Generate both synthetic designs and write them in the layout the command
//! line tool reads (chips.circ, frame.csv, truth.json).
//!
//! cargo run --release --example synth_data -- [out_dir] [n]

use std::path::PathBuf;

use causal_chips::synth::{gen_confounded, gen_heterogeneous, oracle_hajek, write_synth, SynthSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().map_or_else(|| std::env::temp_dir().join("causal-chips-synth"), PathBuf::from);
    let n: usize = args.next().map_or(Ok(500), |s| s.parse())?;

    let spec = SynthSpec { n_units: n, seed: 1, ..Default::default() };
    let conf = gen_confounded(&spec)?;
    write_synth(&conf, &spec, "confounded", &out.join("confounded"))?;
    let f = &conf.frame;
    let treated = f.w.iter().filter(|&&w| w == 1.0).count();
    let arm_mean = |arm: f64| {
        let ys: Vec<f64> = f.y.iter().zip(&f.w).filter(|(_, &w)| w == arm).map(|(y, _)| *y).collect();
        ys.iter().sum::<f64>() / ys.len() as f64
    };
    println!("confounded: {treated}/{n} treated, naive {:.3}, oracle Hajek {:.3}, true {}", arm_mean(1.0) - arm_mean(0.0), oracle_hajek(f, &conf.e_true), spec.tau_true[0]);

    let hspec = SynthSpec { tau_true: vec![1.0, 3.0], ..spec };
    let het = gen_heterogeneous(&hspec)?;
    write_synth(&het, &hspec, "hetero", &out.join("hetero"))?;
    let labels = het.cluster_labels.as_ref().unwrap();
    for k in 0..2 {
        let b: Vec<f64> = labels.iter().zip(&het.brightness).filter(|(l, _)| **l == k).map(|(_, b)| *b).collect();
        let (lo, hi) = b.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!("hetero cluster {k}: {} units, tau {}, brightness {lo:.2}..{hi:.2}", b.len(), hspec.tau_true[k]);
    }
    println!("written under {}", out.display());
    Ok(())
}
