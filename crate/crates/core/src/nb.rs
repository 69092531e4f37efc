//! Negative binomial likelihood with per-specimen size factors, and profile
//! maximum likelihood for per-group means with one shared dispersion.
//!
//! Parameterization: Y_j ~ NB(mean μ_g d_j, dispersion k), variance
//! m + m²/k. This engine backs both the single-sample fit in `genmodel` and
//! the two-group Wald test in `nbglm` (an intercept-plus-indicator GLM with
//! log link has exactly these per-group means as its MLE).

use crate::special::{digamma, ln_gamma_ratio, ln_factorial, trigamma};

/// Dispersion above which the fit is treated as the Poisson limit.
pub(crate) const K_MAX: f64 = 1e10;
pub(crate) const K_MIN: f64 = 1e-4;
pub(crate) const GRAD_TOL: f64 = 1e-8;
pub(crate) const MAX_ITER: usize = 100;

#[derive(Debug, Clone)]
pub(crate) struct ProfileFit {
    /// Per-group mean on the size-factor-one scale.
    pub mu: Vec<f64>,
    pub k: f64,
    pub converged: bool,
    pub poisson_limit: bool,
    pub iterations: usize,
}

/// Distinct observed values with multiplicities. Terms that depend only on
/// (k, y) are summed once per distinct value by running sums over i < y.
pub(crate) struct Tally {
    values: Vec<u64>,
    mult: Vec<f64>,
    ln_factorials: f64,
}

/// Largest y handled by running sums; above it special functions are used.
const RUNNING_LIMIT: u64 = 2048;

impl Tally {
    pub(crate) fn new(y: &[u64]) -> Self {
        let mut sorted = y.to_vec();
        sorted.sort_unstable();
        let mut values = Vec::new();
        let mut mult: Vec<f64> = Vec::new();
        for v in sorted {
            if values.last() == Some(&v) {
                *mult.last_mut().expect("paired") += 1.0;
            } else {
                values.push(v);
                mult.push(1.0);
            }
        }
        let ln_factorials = values.iter().zip(&mult).map(|(&v, &c)| c * ln_factorial(v)).sum();
        Tally { values, mult, ln_factorials }
    }

    /// Multiplicity-weighted sums of ln Γ(k+y) − ln Γ(k), ψ(k+y) − ψ(k) and
    /// ψ'(k+y) − ψ'(k). `order` 0 computes only the first, 1 the first two.
    fn k_terms(&self, k: f64, order: u8) -> (f64, f64, f64) {
        let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
        let (mut c0, mut c1, mut c2) = (0.0, 0.0, 0.0);
        let mut i: u64 = 0;
        for (&v, &c) in self.values.iter().zip(&self.mult) {
            if v <= RUNNING_LIMIT {
                while i < v {
                    let x = k + i as f64;
                    c0 += x.ln();
                    if order >= 1 {
                        let inv = 1.0 / x;
                        c1 += inv;
                        if order >= 2 {
                            c2 -= inv * inv;
                        }
                    }
                    i += 1;
                }
                t0 += c * c0;
                t1 += c * c1;
                t2 += c * c2;
            } else {
                t0 += c * ln_gamma_ratio(k, v);
                if order >= 1 {
                    t1 += c * (digamma(k + v as f64) - digamma(k));
                }
                if order >= 2 {
                    t2 += c * (trigamma(k + v as f64) - trigamma(k));
                }
            }
        }
        (t0, t1, t2)
    }
}

/// Log-likelihood of one observation with mean `m`.
#[inline]
pub(crate) fn ll_obs(y: u64, m: f64, k: f64) -> f64 {
    if m <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let yf = y as f64;
    ln_gamma_ratio(k, y) - ln_factorial(y) - k * (m / k).ln_1p() + yf * (m / (m + k)).ln()
}

pub(crate) fn loglik(tally: &Tally, y: &[u64], d: &[f64], group: &[usize], mu: &[f64], k: f64) -> f64 {
    let mut ll = tally.k_terms(k, 0).0 - tally.ln_factorials;
    for ((&yj, &dj), &g) in y.iter().zip(d).zip(group) {
        let m = mu[g] * dj;
        if m <= 0.0 {
            if yj > 0 {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        ll += -k * (m / k).ln_1p() + yj as f64 * (m / (m + k)).ln();
    }
    ll
}

/// MLE of one group's mean for fixed k: root of Σ (y − μd)/(1 + μd/k).
pub(crate) fn group_mean(y: &[u64], d: &[f64], group: &[usize], g: usize, k: f64) -> f64 {
    let (mut sy, mut sd) = (0.0, 0.0);
    for ((&yj, &dj), &gj) in y.iter().zip(d).zip(group) {
        if gj == g {
            sy += yj as f64;
            sd += dj;
        }
    }
    if sy == 0.0 {
        return 0.0;
    }
    let mut t = (sy / sd).ln();
    for _ in 0..100 {
        let mu = t.exp();
        let (mut f, mut fp) = (0.0, 0.0);
        for ((&yj, &dj), &gj) in y.iter().zip(d).zip(group) {
            if gj != g {
                continue;
            }
            let m = mu * dj;
            let denom = 1.0 + m / k;
            f += (yj as f64 - m) / denom;
            fp -= m * (1.0 + yj as f64 / k) / (denom * denom);
        }
        let step = (f / fp).clamp(-5.0, 5.0);
        t -= step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    t.exp()
}

pub(crate) fn group_means(y: &[u64], d: &[f64], group: &[usize], n_groups: usize, k: f64) -> Vec<f64> {
    (0..n_groups).map(|g| group_mean(y, d, group, g, k)).collect()
}

/// d/dk and d²/dk² of the log-likelihood at fixed means.
fn dispersion_derivatives(tally: &Tally, y: &[u64], d: &[f64], group: &[usize], mu: &[f64], k: f64) -> (f64, f64) {
    let (_, mut g1, mut g2) = tally.k_terms(k, 2);
    for ((&yj, &dj), &gj) in y.iter().zip(d).zip(group) {
        let m = mu[gj] * dj;
        let yf = yj as f64;
        g1 += -(m / k).ln_1p() + (m - yf) / (k + m);
        g2 += 1.0 / k - 2.0 / (k + m) + (yf + k) / ((k + m) * (k + m));
    }
    (g1, g2)
}

/// Moment-based starting dispersion from size-factor-scaled values.
pub(crate) fn moment_dispersion(y: &[u64], d: &[f64], group: &[usize], n_groups: usize) -> (Vec<f64>, f64) {
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0.0; n_groups];
    for ((&yj, &dj), &g) in y.iter().zip(d).zip(group) {
        sum[g] += yj as f64 / dj;
        cnt[g] += 1.0;
    }
    let means: Vec<f64> = sum.iter().zip(&cnt).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect();
    let mut ss = 0.0;
    let mut inv_d = 0.0;
    for ((&yj, &dj), &g) in y.iter().zip(d).zip(group) {
        ss += (yj as f64 / dj - means[g]).powi(2);
        inv_d += means[g] / dj;
    }
    let n = y.len() as f64;
    let df = (n - n_groups as f64).max(1.0);
    let var = ss / df;
    let mean_sq = means.iter().zip(&cnt).map(|(m, c)| m * m * c).sum::<f64>() / n;
    let excess = var - inv_d / n;
    let k = if excess > 1e-12 * mean_sq.max(1e-300) {
        (mean_sq / excess).clamp(K_MIN, K_MAX)
    } else {
        K_MAX
    };
    (means, k)
}

/// Profile maximum likelihood over ln k with group means re-solved at every
/// step. Convergence: |∂ℓ/∂ln k| < 1e-8, or the Poisson boundary with the
/// likelihood still increasing in k.
pub(crate) fn fit_profile(y: &[u64], d: &[f64], group: &[usize], n_groups: usize) -> ProfileFit {
    let tally = Tally::new(y);
    let (_, k0) = moment_dispersion(y, d, group, n_groups);
    let (lo, hi) = (K_MIN.ln(), K_MAX.ln());
    let mut theta = k0.ln().clamp(lo, hi);
    let mut mu = group_means(y, d, group, n_groups, theta.exp());
    let mut ll = loglik(&tally, y, d, group, &mu, theta.exp());
    let mut converged = false;
    let mut poisson_limit = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let k = theta.exp();
        let (g1, g2) = dispersion_derivatives(&tally, y, d, group, &mu, k);
        let grad = k * g1;
        let hess = k * k * g2 + k * g1;
        if grad.abs() < GRAD_TOL {
            converged = true;
            break;
        }
        if theta >= hi - 1e-12 && grad > 0.0 {
            converged = true;
            poisson_limit = true;
            break;
        }
        if theta <= lo + 1e-12 && grad < 0.0 {
            converged = true;
            break;
        }
        let mut step = if hess < 0.0 { -grad / hess } else { grad.signum() };
        step = step.clamp(-3.0, 3.0);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = (theta + step).clamp(lo, hi);
            let cmu = group_means(y, d, group, n_groups, cand.exp());
            let cll = loglik(&tally, y, d, group, &cmu, cand.exp());
            if cll >= ll - 1e-12 * ll.abs() {
                theta = cand;
                mu = cmu;
                ll = cll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent possible along the Newton direction: at numerical optimum.
            converged = grad.abs() < 1e-6 * (1.0 + ll.abs());
            break;
        }
    }
    ProfileFit {
        mu,
        k: theta.exp(),
        converged,
        poisson_limit,
        iterations,
    }
}
