//! EM for a mixture of treatment effects with a softmax gate on image features.
//!
//! ```text
//! y_i = α + x_i'β + w_i τ_{c_i} + ε_i,    ε_i ~ N(0, σ²)
//! P(c_i = k | φ_i) = softmax_k(θ_k'[1, φ_i]),    θ_K ≡ 0
//! ```
//!
//! The outcome M-step is an exact weighted least-squares solve; the gate
//! M-step takes ridge-penalized multinomial Newton steps that never decrease
//! the expected complete-data objective. The penalized observed-data
//! log-likelihood is therefore non-decreasing across iterations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::HeteroError;
use crate::linalg::solve_spd;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inputs in the form EM works on.
#[derive(Debug, Clone)]
pub struct EmData {
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    /// `[1, x]`, `N × (1 + P)`.
    pub u: DMatrix<f64>,
    /// `[1, φ̃]` with standardized embeddings, `N × (1 + D)`.
    pub g: DMatrix<f64>,
}

impl EmData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            w: rows.iter().map(|&i| self.w[i]).collect(),
            u: self.u.select_rows(rows.iter()),
            g: self.g.select_rows(rows.iter()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmParams {
    /// `(α, β)`.
    pub coef: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma2: f64,
    /// `K × (1 + D)`, last row zero.
    pub theta: DMatrix<f64>,
}

impl EmParams {
    pub fn k(&self) -> usize {
        self.tau.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub gate_lambda: f64,
    pub gate_newton_steps: usize,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub params: EmParams,
    pub resp: DMatrix<f64>,
    pub gate: DMatrix<f64>,
    /// Penalized observed-data log-likelihood after initialization and after every iteration.
    pub trace: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub gate_grad_norm: f64,
}

/// `x' diag(wts) x`; weights may be negative.
fn xt_diag_x(x: &DMatrix<f64>, wts: &[f64]) -> DMatrix<f64> {
    let mut s = x.clone();
    for (i, &wi) in wts.iter().enumerate() {
        s.row_mut(i).iter_mut().for_each(|v| *v *= wi);
    }
    x.tr_mul(&s)
}

/// Softmax gate probabilities, `N × K`.
pub fn gate_probs(g: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = g * theta.transpose();
    for mut row in s.row_iter_mut() {
        let m = row.max();
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let z = row.sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    s
}

fn gate_penalty(theta: &DMatrix<f64>, lambda: f64) -> f64 {
    let k = theta.nrows();
    let mut s = 0.0;
    for c in 0..k.saturating_sub(1) {
        s += theta.row(c).iter().skip(1).map(|v| v * v).sum::<f64>();
    }
    0.5 * lambda * s
}

/// Observed-data log-likelihood, posterior responsibilities and gate probabilities.
pub fn e_step(data: &EmData, p: &EmParams) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let n = data.n();
    let k = p.k();
    let gate = gate_probs(&data.g, &p.theta);
    let base = &data.u * DVector::from_column_slice(&p.coef);
    let mut resp = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    let mut logs = vec![0.0; k];
    for i in 0..n {
        for (c, l) in logs.iter_mut().enumerate() {
            let r = data.y[i] - base[i] - data.w[i] * p.tau[c];
            *l = gate[(i, c)].ln() - 0.5 * (LN_2PI + p.sigma2.ln() + r * r / p.sigma2);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        ll += m + z.ln();
        for c in 0..k {
            resp[(i, c)] = (logs[c] - m).exp() / z;
        }
    }
    (ll, resp, gate)
}

pub fn penalized_loglik(data: &EmData, p: &EmParams, lambda: f64) -> f64 {
    e_step(data, p).0 - gate_penalty(&p.theta, lambda)
}

fn check_clusters(data: &EmData, resp: &DMatrix<f64>) -> Result<(), usize> {
    let n = data.n() as f64;
    let n_treated = data.w.iter().sum::<f64>();
    for c in 0..resp.ncols() {
        let total = resp.column(c).sum();
        let treated: f64 = resp.column(c).iter().zip(&data.w).map(|(r, w)| r * w).sum();
        if total < 1e-6 * n || treated < 1e-6 * n_treated {
            return Err(c);
        }
    }
    Ok(())
}

/// Weighted least squares for `(α, β, τ_1..τ_K)` followed by the σ² update.
fn m_step_outcome(data: &EmData, resp: &DMatrix<f64>, sigma2_floor: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let n = data.n();
    let q = data.u.ncols();
    let k = resp.ncols();
    let dim = q + k;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    // Σ_k r_ik = 1, so the [1, x] block is an unweighted Gram matrix.
    a.view_mut((0, 0), (q, q)).copy_from(&data.u.tr_mul(&data.u));
    let uy = data.u.tr_mul(&DVector::from_column_slice(&data.y));
    b.rows_mut(0, q).copy_from(&uy);
    for c in 0..k {
        let rw: Vec<f64> = (0..n).map(|i| resp[(i, c)] * data.w[i]).collect();
        let cross = data.u.tr_mul(&DVector::from_column_slice(&rw));
        for j in 0..q {
            a[(j, q + c)] = cross[j];
            a[(q + c, j)] = cross[j];
        }
        a[(q + c, q + c)] = rw.iter().sum();
        b[q + c] = rw.iter().zip(&data.y).map(|(r, y)| r * y).sum();
    }
    let sol = solve_spd(a, &b)?;
    let coef: Vec<f64> = sol.rows(0, q).iter().copied().collect();
    let tau: Vec<f64> = sol.rows(q, k).iter().copied().collect();
    let base = &data.u * DVector::from_column_slice(&coef);
    let mut ss = 0.0;
    for i in 0..n {
        for c in 0..k {
            let r = data.y[i] - base[i] - data.w[i] * tau[c];
            ss += resp[(i, c)] * r * r;
        }
    }
    Some((coef, tau, (ss / n as f64).max(sigma2_floor)))
}

fn gate_objective(data: &EmData, resp: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64) -> f64 {
    let gate = gate_probs(&data.g, theta);
    let mut s = 0.0;
    for (r, g) in resp.iter().zip(gate.iter()) {
        if *r > 0.0 {
            s += r * g.ln();
        }
    }
    s - gate_penalty(theta, lambda)
}

/// Returns the updated θ and the gradient norm at the starting point.
fn m_step_gate(data: &EmData, resp: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64, steps: usize) -> (DMatrix<f64>, f64) {
    let k = theta.nrows();
    if k == 1 {
        return (theta.clone(), 0.0);
    }
    let m = data.g.ncols();
    let free = k - 1;
    let mut theta = theta.clone();
    let mut obj = gate_objective(data, resp, &theta, lambda);
    let mut first_norm = None;
    for _ in 0..steps.max(1) {
        let gate = gate_probs(&data.g, &theta);
        let mut grad = DVector::<f64>::zeros(free * m);
        for c in 0..free {
            let diff: Vec<f64> = (0..data.n()).map(|i| resp[(i, c)] - gate[(i, c)]).collect();
            let gc = data.g.tr_mul(&DVector::from_column_slice(&diff));
            for j in 0..m {
                let pen = if j == 0 { 0.0 } else { lambda * theta[(c, j)] };
                grad[c * m + j] = gc[j] - pen;
            }
        }
        let gnorm = grad.norm();
        first_norm.get_or_insert(gnorm);
        if gnorm < 1e-10 {
            break;
        }
        // Negative Hessian, block (c, l) = Σ_i g_ic (δ_cl − g_il) G_i G_i' + λ δ_cl I'.
        let mut h = DMatrix::<f64>::zeros(free * m, free * m);
        for c in 0..free {
            for l in c..free {
                let wts: Vec<f64> = (0..data.n())
                    .map(|i| if c == l { gate[(i, c)] * (1.0 - gate[(i, c)]) } else { -gate[(i, c)] * gate[(i, l)] })
                    .collect();
                let blk = xt_diag_x(&data.g, &wts);
                h.view_mut((c * m, l * m), (m, m)).copy_from(&blk);
                if c != l {
                    h.view_mut((l * m, c * m), (m, m)).copy_from(&blk.transpose());
                }
            }
            for j in 1..m {
                h[(c * m + j, c * m + j)] += lambda;
            }
        }
        let jitter = 1e-10 * h.diagonal().max().max(1e-300);
        let step = solve_spd(h.clone(), &grad).or_else(|| {
            let mut hj = h;
            for j in 0..free * m {
                hj[(j, j)] += jitter;
            }
            solve_spd(hj, &grad)
        });
        let Some(step) = step else { break };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let mut cand = theta.clone();
            for c in 0..free {
                for j in 0..m {
                    cand[(c, j)] += t * step[c * m + j];
                }
            }
            let cand_obj = gate_objective(data, resp, &cand, lambda);
            if cand_obj.is_finite() && cand_obj >= obj {
                moved = cand_obj > obj;
                theta = cand;
                obj = cand_obj;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (theta, first_norm.unwrap_or(0.0))
}

/// Pooled OLS of `y` on `[1, x, w]`: returns `(coef, τ, residual variance)`.
pub fn pooled_ols(data: &EmData) -> Option<(Vec<f64>, f64, f64)> {
    let n = data.n();
    let q = data.u.ncols();
    let z = DMatrix::from_fn(n, q + 1, |i, j| if j < q { data.u[(i, j)] } else { data.w[i] });
    let sol = solve_spd(z.tr_mul(&z), &z.tr_mul(&DVector::from_column_slice(&data.y)))?;
    let fitted = &z * &sol;
    let ss: f64 = fitted.iter().zip(&data.y).map(|(f, y)| (y - f) * (y - f)).sum();
    Some((sol.rows(0, q).iter().copied().collect(), sol[q], ss / n as f64))
}

/// Starting point: pooled OLS with cluster effects spread around the pooled
/// effect. `restart > 0` jitters the spread with a seeded generator.
pub fn initial_params(data: &EmData, k: usize, seed: u64, restart: usize) -> Option<EmParams> {
    let (coef, tau0, var) = pooled_ols(data)?;
    let s = var.sqrt().max(1e-6);
    let tau = if k == 1 {
        vec![tau0]
    } else if restart == 0 {
        (0..k).map(|c| tau0 + s * (2.0 * c as f64 / (k - 1) as f64 - 1.0)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let mut t: Vec<f64> = (0..k).map(|_| tau0 + s * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
        t.sort_by(f64::total_cmp);
        t
    };
    Some(EmParams { coef, tau, sigma2: var.max(1e-12), theta: DMatrix::zeros(k, data.g.ncols()) })
}

/// Runs EM from `init` until the relative change of the penalized
/// log-likelihood drops below `tol`.
pub fn run_em(data: &EmData, init: EmParams, s: &EmSettings) -> Result<EmOutcome, HeteroError> {
    let var_y = crate::linalg::sample_sd(&data.y).powi(2);
    let floor = 1e-10 * var_y.max(1e-300);
    let mut p = init;
    let (mut ll, mut resp, _) = e_step(data, &p);
    let mut obj = ll - gate_penalty(&p.theta, s.gate_lambda);
    let mut trace = vec![obj];
    let mut gnorm = 0.0;
    for it in 1..=s.max_iters {
        if let Err(cluster) = check_clusters(data, &resp) {
            return Err(HeteroError::EmptyCluster { cluster, restarts: 0 });
        }
        let (coef, tau, sigma2) = m_step_outcome(data, &resp, floor).ok_or(HeteroError::EmptyCluster { cluster: 0, restarts: 0 })?;
        let (theta, g) = m_step_gate(data, &resp, &p.theta, s.gate_lambda, s.gate_newton_steps);
        gnorm = g;
        p = EmParams { coef, tau, sigma2, theta };
        let gate;
        (ll, resp, gate) = e_step(data, &p);
        let new_obj = ll - gate_penalty(&p.theta, s.gate_lambda);
        trace.push(new_obj);
        let change = (new_obj - obj).abs();
        obj = new_obj;
        if change <= s.tol * (1.0 + obj.abs()) {
            return Ok(EmOutcome { params: p, resp, gate, trace, loglik: ll, iterations: it, gate_grad_norm: gnorm });
        }
    }
    let change = trace.len().checked_sub(2).map_or(f64::NAN, |i| trace[i + 1] - trace[i]);
    Err(HeteroError::NonConvergence { iterations: s.max_iters, loglik_change: change, gate_grad_norm: gnorm })
}
