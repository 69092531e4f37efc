//! Special functions and the handful of samplers shared across modules.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use statrs::distribution::{ContinuousCDF, Normal};

pub use statrs::function::gamma::ln_gamma;

/// Digamma function ψ(x) for x > 0.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}

/// Trigamma function ψ'(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0))))
}

/// ln Γ(k + y) − ln Γ(k) for k > 0 and integer y ≥ 0, accurate for huge k.
pub fn ln_gamma_ratio(k: f64, y: u64) -> f64 {
    if y == 0 {
        return 0.0;
    }
    if y <= 64 {
        return (0..y).map(|i| (k + i as f64).ln()).sum();
    }
    let yf = y as f64;
    if k < 1e5 {
        return ln_gamma(k + yf) - ln_gamma(k);
    }
    // Stirling difference; the correction series cancels to O(1/k²).
    let kp = k + yf;
    let corr = |z: f64| 1.0 / (12.0 * z) - 1.0 / (360.0 * z * z * z);
    (kp - 0.5) * (yf / k).ln_1p() + yf * k.ln() - yf + corr(kp) - corr(k)
}

/// ln y!
pub fn ln_factorial(y: u64) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

/// Log-pmf of the negative binomial with mean `mu` and dispersion `k`
/// (variance mu + mu²/k).
pub fn nb_ln_pmf(y: u64, mu: f64, k: f64) -> f64 {
    if mu <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let yf = y as f64;
    let ln_mk = (mu + k).ln();
    ln_gamma_ratio(k, y) - ln_factorial(y) - k * (mu / k).ln_1p() + yf * (mu.ln() - ln_mk)
}

/// Log-pmf of the Poisson distribution.
pub fn poisson_ln_pmf(y: u64, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y as f64 * lambda.ln() - lambda - ln_factorial(y)
}

/// Two-sided normal tail probability P(|Z| ≥ |z|).
pub fn normal_two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters must be positive and finite")
        .sample(rng)
}

pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(lambda)
        .expect("poisson rate must be finite")
        .sample(rng);
    draw as u64
}

/// Negative binomial draw through its gamma-Poisson mixture.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, mu: f64, k: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let lambda = sample_gamma(rng, k, k / mu);
    sample_poisson(rng, lambda)
}

pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64], out: &mut [u64]) {
    let mut remaining_n = n;
    let mut remaining_p: f64 = probs.iter().sum();
    for (slot, &p) in out.iter_mut().zip(probs) {
        if remaining_n == 0 || remaining_p <= 0.0 {
            *slot = 0;
            continue;
        }
        let draw = sample_binomial(rng, remaining_n, (p / remaining_p).clamp(0.0, 1.0));
        *slot = draw;
        remaining_n -= draw;
        remaining_p -= p;
    }
    if remaining_n > 0 {
        if let Some(last) = probs.iter().rposition(|&p| p > 0.0) {
            out[last] += remaining_n;
        }
    }
}

/// Symmetric Dirichlet draw.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = concentration.iter().map(|&a| sample_gamma(rng, a, 1.0)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}
