//! Rank-normalized split-R̂ and bulk effective sample size.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::special::normal_quantile;
use crate::transforms::average_ranks;

/// Splits every chain into halves, dropping the middle draw of odd chains.
fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

/// Replaces draws by normal scores of their pooled average ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len() as f64;
    let ranks = average_ranks(&pooled);
    let mut it = ranks.into_iter().map(|r| normal_quantile((r - 0.375) / (s + 0.25)));
    chains.iter().map(|c| (0..c.len()).map(|_| it.next().unwrap_or(f64::NAN)).collect()).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    if x.iter().all(|&v| v == x[0]) {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic potential scale reduction on equal-length chains. NaN when every
/// draw is equal, ∞ when chains are constant but differ.
fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let b = n * var(&means);
    if w == 0.0 {
        return if b > 0.0 { f64::INFINITY } else { f64::NAN };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

fn usable(chains: &[&[f64]]) -> bool {
    chains.len() >= 2 && chains.iter().all(|c| c.len() == chains[0].len() && c.len() >= 4)
}

/// Rank-normalized split-R̂: the larger of the bulk value and the value on
/// draws folded about the pooled median. Needs ≥ 2 equal-length chains of
/// ≥ 4 draws; NaN otherwise or when all draws are equal.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    if !usable(chains) || chains.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let halves = split(chains);
    let bulk = rhat_basic(&rank_normalize(&halves));
    if !bulk.is_finite() {
        return bulk;
    }
    let mut pooled: Vec<f64> = halves.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let k = pooled.len();
    let med = if k % 2 == 1 { pooled[k / 2] } else { 0.5 * (pooled[k / 2 - 1] + pooled[k / 2]) };
    let folded: Vec<Vec<f64>> = halves.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    if tail.is_nan() {
        bulk
    } else {
        bulk.max(tail)
    }
}

/// Autocovariance by zero-padded FFT, shared across parameters of one
/// chain length.
pub(crate) struct Autocov {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Autocov {
    pub(crate) fn new(n: usize) -> Self {
        let len = (2 * n).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        Autocov {
            n,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }

    /// Biased estimate (1/n) Σ (x_i − x̄)(x_{i+t} − x̄), t = 0..n.
    fn compute(&self, x: &[f64]) -> Vec<f64> {
        let len = self.fwd.len();
        let m = mean(x);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - m, 0.0)).collect();
        buf.resize(len, Complex::new(0.0, 0.0));
        self.fwd.process(&mut buf);
        buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
        self.inv.process(&mut buf);
        let scale = 1.0 / (len as f64 * self.n as f64);
        buf[..self.n].iter().map(|c| c.re * scale).collect()
    }

    /// ESS with Geyer's initial monotone sequence over split chains.
    pub(crate) fn ess(&self, chains: &[Vec<f64>]) -> f64 {
        let n = self.n;
        let m = chains.len();
        let acov: Vec<Vec<f64>> = chains.iter().map(|c| self.compute(c)).collect();
        let mean_var = acov.iter().map(|a| a[0]).sum::<f64>() / m as f64 * n as f64 / (n as f64 - 1.0);
        let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
        let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
        if m > 1 {
            var_plus += var(&means);
        }
        if !(var_plus > 0.0) {
            return f64::NAN;
        }
        let rho = |t: usize| 1.0 - (mean_var - acov.iter().map(|a| a[t]).sum::<f64>() / m as f64) / var_plus;
        let mut rho_hat = vec![0.0; n];
        rho_hat[0] = 1.0;
        let (mut even, mut odd) = (1.0, rho(1));
        rho_hat[1] = odd;
        let mut t = 0;
        while t + 5 < n && even + odd > 0.0 {
            t += 2;
            even = rho(t);
            odd = rho(t + 1);
            if even + odd >= 0.0 {
                rho_hat[t] = even;
                rho_hat[t + 1] = odd;
            }
        }
        let max_t = t;
        if even > 0.0 {
            rho_hat[max_t] = even;
        }
        let mut t = 0;
        while t + 4 <= max_t {
            t += 2;
            if rho_hat[t] + rho_hat[t + 1] > rho_hat[t - 2] + rho_hat[t - 1] {
                rho_hat[t] = (rho_hat[t - 2] + rho_hat[t - 1]) / 2.0;
                rho_hat[t + 1] = rho_hat[t];
            }
        }
        let total = (m * n) as f64;
        let tau = (-1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + rho_hat[max_t]).max(1.0 / total.log10());
        total / tau
    }
}

fn bulk_ess_with(acf: &Autocov, chains: &[&[f64]]) -> f64 {
    let halves = rank_normalize(&split(chains));
    acf.ess(&halves)
}

/// Bulk ESS on rank-normalized split chains. NaN for unusable input or
/// constant draws.
pub fn bulk_ess(chains: &[&[f64]]) -> f64 {
    if !usable(chains) || chains.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    bulk_ess_with(&Autocov::new(chains[0].len() / 2), chains)
}

/// R̂ and ESS of one parameter.
pub(crate) fn rhat_and_ess(acf: &Autocov, chains: &[&[f64]]) -> (f64, f64) {
    if !usable(chains) || chains.iter().flat_map(|c| c.iter()).any(|v| !v.is_finite()) {
        return (f64::NAN, f64::NAN);
    }
    (split_rhat(chains), bulk_ess_with(acf, chains))
}

/// Order statistics of a diagnostic over parameters, ignoring NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Quantiles> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
            if lo == hi || v[hi] == v[lo] {
                v[lo]
            } else {
                v[lo] + (h - lo as f64) * (v[hi] - v[lo])
            }
        };
        Some(Quantiles {
            min: v[0],
            q05: at(0.05),
            median: at(0.5),
            q95: at(0.95),
            max: v[v.len() - 1],
        })
    }
}
