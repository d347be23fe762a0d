use causal_chips::confound::{
    analyze_embeddings, bootstrap_ate, design_matrix, evaluate_propensity, fit_propensity, hajek_ate, metrics, occlusion_map,
    predict_propensity, BootstrapConfig, ConfoundError, Fill, ModelConfig, PropensityConfig,
};
use causal_chips::embed::{make_kernels, EmbeddingConfig};
use causal_chips::{CausalFrame, EmbeddingMatrix, ImageTensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn logistic_data(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p + 1, |_, j| if j == 0 { 1.0 } else { 3.0 * normal(&mut rng) + j as f64 });
    let w = (0..n)
        .map(|i| {
            let s = 0.4 * (x[(i, 1)] - 1.0) - 0.2 * (x[(i, 2)] - 2.0);
            if rng.random::<f64>() < 1.0 / (1.0 + (-s).exp()) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    (x, w)
}

/// Plain gradient descent on the same penalized objective, z-scoring with population sd.
fn gradient_descent_oracle(x: &DMatrix<f64>, w: &[f64], lambda: f64) -> Vec<f64> {
    let (n, p) = x.shape();
    let mut z = x.clone();
    for j in 1..p {
        let m = x.column(j).mean();
        let sd = (x.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            z[(i, j)] = (x[(i, j)] - m) / sd;
        }
    }
    let lip = 0.25 * (z.transpose() * &z).symmetric_eigenvalues().max() + lambda;
    let mut beta = vec![0.0; p];
    for _ in 0..200_000 {
        let mut g = vec![0.0; p];
        for i in 0..n {
            let s: f64 = (0..p).map(|j| z[(i, j)] * beta[j]).sum();
            let r = 1.0 / (1.0 + (-s).exp()) - w[i];
            for j in 0..p {
                g[j] += r * z[(i, j)];
            }
        }
        for j in 1..p {
            g[j] += lambda * beta[j];
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-11 {
            break;
        }
        for j in 0..p {
            beta[j] -= g[j] / lip;
        }
    }
    (0..n).map(|i| 1.0 / (1.0 + (-(0..p).map(|j| z[(i, j)] * beta[j]).sum::<f64>()).exp())).collect()
}

#[test]
fn newton_agrees_with_slow_oracle() {
    for (seed, lambda) in [(1, 1.0), (2, 0.1), (3, 10.0)] {
        let (x, w) = logistic_data(80, 3, seed);
        let cfg = PropensityConfig { l2_lambda: lambda, clip_eps: 1e-9, ..Default::default() };
        let m = fit_propensity(&x, &w, &cfg).unwrap();
        let got = predict_propensity(&m, &x);
        for (a, b) in got.iter().zip(gradient_descent_oracle(&x, &w, lambda)) {
            assert!((a - b).abs() < 1e-5, "lambda={lambda}: {a} vs {b}");
        }
    }
}

#[test]
fn cv_metrics_on_noise_and_on_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 400;
    let w: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    let noise = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
    let m = evaluate_propensity(&noise, &w, 5, 1, &PropensityConfig::default()).unwrap();
    assert!((m.auc - 0.5).abs() < 0.1, "noise auc {}", m.auc);

    let signal = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { w[i] * 2.0 - 1.0 + 0.1 * ((i % 7) as f64 - 3.0) });
    let m = evaluate_propensity(&signal, &w, 5, 1, &PropensityConfig::default()).unwrap();
    assert_eq!(m.auc, 1.0);
    assert_eq!(m.acc, 1.0);
}

#[test]
fn balanced_intercept_only_cv_nll_is_ln2() {
    let w: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
    let x = DMatrix::from_element(100, 1, 1.0);
    let m = evaluate_propensity(&x, &w, 5, 3, &PropensityConfig::default()).unwrap();
    assert!((m.nll - std::f64::consts::LN_2).abs() < 1e-9, "{}", m.nll);
    assert!((metrics::mean_nll(&w, &[0.5; 100]) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn auc_uses_midranks() {
    assert_eq!(metrics::auc(&[1.0, 0.0], &[0.5, 0.5]), 0.5);
    assert_eq!(metrics::auc(&[1.0, 0.0, 1.0, 0.0], &[0.9, 0.1, 0.4, 0.4]), 0.875);
    assert!(matches!(evaluate_propensity(&DMatrix::from_element(6, 1, 1.0), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 5, 0, &PropensityConfig::default()), Err(ConfoundError::TooFewUnits { .. })));
}

#[test]
fn folds_are_stratified() {
    let w: Vec<f64> = (0..53).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let f = metrics::stratified_folds(&w, 5, 9);
    for arm in [0.0, 1.0] {
        let mut counts = [0usize; 5];
        for (i, &k) in f.iter().enumerate() {
            if w[i] == arm {
                counts[k] += 1;
            }
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
    }
}

#[test]
fn hajek_hand_case() {
    let t = hajek_ate(&[1.0, 1.0, 0.0, 0.0], &[2.0, 4.0, 1.0, 3.0], &[0.8, 0.4, 0.5, 0.2]).unwrap();
    assert!((t - 1.564_102_564_102_564).abs() < 1e-12);
}

#[test]
fn bootstrap_is_seeded_and_respects_key_clusters() {
    let (x, w) = logistic_data(120, 2, 4);
    let y: Vec<f64> = (0..120).map(|i| w[i] + x[(i, 1)] * 0.1).collect();
    let keys: Vec<String> = (0..120).map(|i| format!("img{}", i / 3)).collect();
    let cfg = BootstrapConfig { n_boot: 30, seed: 5, cluster_by_key: true };
    let a = bootstrap_ate(&x, &w, &y, &keys, &PropensityConfig::default(), &cfg).unwrap();
    let b = bootstrap_ate(&x, &w, &y, &keys, &PropensityConfig::default(), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.se > 0.0 && a.replicates.len() == 30);

    let groups = causal_chips::confound::bootstrap::clusters_by_key(&keys);
    assert_eq!(groups.len(), 40);
    let units = causal_chips::confound::bootstrap::resample_units(&groups, &w, 5, 0).unwrap();
    assert_eq!(units.len(), 120);
    for chunk in units.chunks(3) {
        assert_eq!(chunk[0] / 3, chunk[2] / 3);
    }
}

#[test]
fn salience_peaks_on_the_textured_quadrant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = ImageTensor::from_fn(24, 24, 1, |r, c, _| if r < 12 && c < 12 { rng.random_range(0.0..1.0) } else { 0.0 });
    let bank = make_kernels(&EmbeddingConfig { n_embed_dim: 16, ..Default::default() }, 1);
    let grid = occlusion_map(&img, &bank, 6, 6, Fill::Constant(0.0), |phi| phi.iter().sum()).unwrap();
    assert_eq!((grid.rows, grid.cols), (4, 4));
    let (r, c) = grid.argmax();
    assert!(r < 2 && c < 2, "peak at ({r}, {c})");
    for r in 0..4 {
        for c in 0..4 {
            if r >= 2 || c >= 2 {
                assert_eq!(grid.get(r, c), 0.0, "cell ({r}, {c})");
            } else {
                assert!(grid.get(r, c) > 0.0);
            }
        }
    }
    assert!(matches!(occlusion_map(&img, &bank, 30, 1, Fill::BandMean, |_| 0.0), Err(ConfoundError::ImageTooSmall { .. })));
}

#[test]
fn pipeline_on_embeddings_reports_all_fields() {
    let (x, w) = logistic_data(150, 2, 6);
    let y: Vec<f64> = (0..150).map(|i| 2.0 * w[i] + x[(i, 1)]).collect();
    let keys: Vec<String> = (0..150).map(|i| format!("k{i}")).collect();
    let frame = CausalFrame::new(keys.clone(), w, y, DMatrix::zeros(150, 0)).unwrap();
    let phi = EmbeddingMatrix { keys, values: x.columns(1, 2).clone_owned() };
    let cfg = ModelConfig { bootstrap: BootstrapConfig { n_boot: 20, ..Default::default() }, ..Default::default() };
    let r = analyze_embeddings(&frame, &phi, &cfg).unwrap();
    assert!((r.tau_hajek - 2.0).abs() < 0.5, "{}", r.tau_hajek);
    assert_eq!(r.ehat.len(), 150);
    assert!(r.ehat.iter().all(|&e| (0.01..=0.99).contains(&e)));
    let json = serde_json::to_value(&r).unwrap();
    for field in ["tauHat_propensityHajek", "tauHat_propensityHajek_se", "tauHat_diffInMeans", "metrics", "ehat"] {
        assert!(json.get(field).is_some(), "missing {field}");
    }
    assert_eq!(design_matrix(&DMatrix::zeros(2, 1), &DMatrix::from_element(2, 2, 5.0)).row(0).iter().copied().collect::<Vec<_>>(), [1.0, 0.0, 5.0, 5.0]);
}
