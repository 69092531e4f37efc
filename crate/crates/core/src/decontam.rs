//! Bayesian contaminant removal with negative controls.
//!
//! For a biological cell with count k and size factor d:
//!
//! ```text
//! k ~ Poisson((λʳ + λᶜ) d),   λᶜ ~ Gamma(αᶜ, βᶜ),   λʳ ~ reference prior
//! ```
//!
//! The reference prior is π(λʳ) ∝ I(λʳ)^½, with I the Fisher information of
//! the marginal p(k | λʳ, d) after integrating λᶜ out, normalised by I(ε) at
//! ε = 1e-8. A cell is called contaminant when the lower HPD limit of λʳ is
//! below the upper HPD limit of λᶜ.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CountTable, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, StatRng};
use crate::special::{sample_binomial, sample_gamma};
use crate::transforms::median_of_ratios;

/// λ at which the reference prior is normalised.
pub const REFERENCE_EPSILON: f64 = 1e-8;
/// Counts above this use a normal approximation to the binomial split.
pub const NORMAL_APPROX_COUNT: u64 = 10_000_000;
/// Prior used for taxa with no usable control signal.
pub const FLOOR_PRIOR: ContamPrior = ContamPrior { alpha_c: 0.01, beta_c: 1.0 };

/// Expected marginal count above which the Fisher information uses its
/// Gaussian limit.
const GAUSSIAN_FISHER_MEAN: f64 = 1e5;
const GRID_POINTS_PER_E: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContamPrior {
    pub alpha_c: f64,
    pub beta_c: f64,
}

impl ContamPrior {
    pub fn check(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if ok(self.alpha_c) && ok(self.beta_c) {
            Ok(())
        } else {
            Err(Error::data(format!(
                "contamination prior needs positive finite parameters, got alpha={}, beta={}",
                self.alpha_c, self.beta_c
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFlag {
    /// Taxon never observed in a control.
    AbsentInControls,
    /// Scaled control intensities have zero variance.
    ZeroVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub taxon_id: String,
    pub prior: ContamPrior,
    pub flag: Option<PriorFlag>,
}

/// Method-of-moments gamma fit to the scaled control intensities K⁰/d⁰ of
/// each taxon: α = mean²/var, β = mean/var (sample variance, n − 1).
/// `controls` holds only negative-control columns.
pub fn estimate_contam_prior(controls: &CountTable, size_factors: &[f64]) -> Result<Vec<PriorEstimate>> {
    let n = controls.n_specimens();
    if n < 2 {
        return Err(Error::precondition(format!(
            "at least 2 negative controls are required, found {n}"
        )));
    }
    if size_factors.len() != n || size_factors.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::data("control size factors must be positive, one per control"));
    }
    Ok((0..controls.n_taxa())
        .map(|i| {
            let x: Vec<f64> = controls.row(i).iter().zip(size_factors).map(|(&k, &d)| k as f64 / d).collect();
            let (prior, flag) = moment_gamma(&x);
            PriorEstimate {
                taxon_id: controls.taxa_ids()[i].clone(),
                prior,
                flag,
            }
        })
        .collect())
}

/// Gamma(α, β) by moments; the floor prior when the data cannot support it.
pub fn moment_gamma(x: &[f64]) -> (ContamPrior, Option<PriorFlag>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return (FLOOR_PRIOR, Some(PriorFlag::AbsentInControls));
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 1e-12 * mean * mean) {
        return (FLOOR_PRIOR, Some(PriorFlag::ZeroVariance));
    }
    (
        ContamPrior {
            alpha_c: mean * mean / var,
            beta_c: mean / var,
        },
        None,
    )
}

/// Fisher information of p(k | λ, d) = Poisson(λd) ⊛ NB(α, β/(β+d)) with
/// respect to λ.
///
/// Uses ∂p(k)/∂λ = d (p(k−1) − p(k)), so I = d² Σ_k (p(k−1) − p(k))² / p(k),
/// summed over the support with the pmf from the convolution recursion
/// (k+1) p(k+1) = (qk + λd + αq) p(k) − λd q p(k−1).
pub fn fisher_information(lambda: f64, d: f64, prior: ContamPrior) -> Result<f64> {
    let ContamPrior { alpha_c: alpha, beta_c: beta } = prior;
    if !(lambda.is_finite() && lambda > 0.0 && d.is_finite() && d > 0.0) {
        return Err(Error::numerical(format!("Fisher information requested at λ={lambda}, d={d}")));
    }
    let a = lambda * d;
    let q = d / (beta + d);
    let ln_p0 = -a - alpha * (d / beta).ln_1p();
    let nb_mean = alpha * d / beta;
    let nb_var = nb_mean * (beta + d) / beta;
    let (mean, var) = (a + nb_mean, a + nb_var);
    if mean > GAUSSIAN_FISHER_MEAN {
        return Ok(d * d / var + d * d / (2.0 * var * var));
    }
    let limit = (mean + 60.0 * var.sqrt() + 2000.0) as u64;
    let mut log_scale = ln_p0;
    let (mut prev, mut cur) = (0.0f64, 1.0f64);
    let mut peak = 1.0f64;
    let mut sum = 0.0;
    let mut kk: u64 = 0;
    loop {
        let diff = prev - cur;
        sum += diff * diff / cur;
        let kf = kk as f64;
        let next = ((q * kf + a + alpha * q) * cur - a * q * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
        kk += 1;
        if !(cur > 0.0) {
            break;
        }
        peak = peak.max(cur);
        if cur > 1e100 {
            prev *= 1e-100;
            cur *= 1e-100;
            peak *= 1e-100;
            sum *= 1e-100;
            log_scale += 100.0 * std::f64::consts::LN_10;
        }
        if (kk as f64 > mean && cur < 1e-20 * peak) || kk > limit {
            break;
        }
    }
    let info = d * d * sum * log_scale.exp();
    if info.is_finite() && info > 0.0 {
        Ok(info)
    } else {
        Err(Error::numerical(format!(
            "Fisher information not finite at λ={lambda}, d={d}, α={alpha}, β={beta} (sum={sum}, log scale={log_scale})"
        )))
    }
}

/// ½ ln(I(λ)/I(ε)) tabulated on a log-λ grid, linearly interpolated.
pub struct ReferencePrior {
    d: f64,
    prior: ContamPrior,
    lo: f64,
    step: f64,
    log_info: Vec<f64>,
    log_info_eps: f64,
}

impl ReferencePrior {
    /// Tabulates the prior for λ ∈ [ε, lambda_max]; values above are computed
    /// on demand.
    pub fn new(d: f64, prior: ContamPrior, lambda_max: f64) -> Result<Self> {
        prior.check()?;
        let lo = REFERENCE_EPSILON.ln();
        let hi = lambda_max.max(REFERENCE_EPSILON * 10.0).ln();
        let n = ((hi - lo) * GRID_POINTS_PER_E).ceil() as usize + 1;
        let step = (hi - lo) / (n - 1) as f64;
        let log_info = (0..n)
            .map(|g| fisher_information((lo + g as f64 * step).exp(), d, prior).map(f64::ln))
            .collect::<Result<Vec<f64>>>()?;
        let log_info_eps = log_info[0];
        Ok(ReferencePrior {
            d,
            prior,
            lo,
            step,
            log_info,
            log_info_eps,
        })
    }

    /// ln π(λ) relative to π(ε).
    pub fn log_density(&self, lambda: f64) -> Result<f64> {
        let x = lambda.ln();
        if x <= self.lo {
            return Ok(0.0);
        }
        let pos = (x - self.lo) / self.step;
        let g = pos.floor() as usize;
        let log_i = if g + 1 < self.log_info.len() {
            let t = pos - g as f64;
            self.log_info[g] * (1.0 - t) + self.log_info[g + 1] * t
        } else {
            fisher_information(lambda, self.d, self.prior)?.ln()
        };
        Ok(0.5 * (log_i - self.log_info_eps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub chains: usize,
    /// Iterations per chain including warmup.
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            thin: 1,
        }
    }
}

impl McmcSettings {
    pub fn check(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 || self.iterations <= self.warmup {
            return Err(Error::data(format!(
                "invalid MCMC settings: {} chains, {} iterations, {} warmup, thin {}",
                self.chains, self.iterations, self.warmup, self.thin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerFlag {
    /// Binomial split replaced by its normal approximation (k > 10⁷).
    NormalApprox,
    /// Sampling failed; intervals are NaN.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub lambda_r: Vec<f64>,
    pub lambda_c: Vec<f64>,
    /// Post-warmup Metropolis acceptance rate for λʳ, averaged over chains.
    pub acceptance_rate: f64,
    pub flags: Vec<SamplerFlag>,
}

/// Warmup adaptation window for the λʳ step size.
const ADAPT_WINDOW: usize = 25;

struct ChainOutput {
    lambda_r: Vec<f64>,
    lambda_c: Vec<f64>,
    accepted: usize,
    proposed: usize,
}

/// Conditional updates for one cell; `log_prior_r` is ln π(λʳ).
struct Sampler<'a> {
    k: u64,
    d: f64,
    prior: ContamPrior,
    log_prior_r: &'a dyn Fn(f64) -> Result<f64>,
}

impl Sampler<'_> {
    /// Log density of ln λʳ given the real-read share kr (Jacobian included).
    fn log_target(&self, lr: f64, kr: u64) -> Result<f64> {
        let base = if kr > 0 { kr as f64 * (lr * self.d).ln() } else { 0.0 };
        Ok(base - lr * self.d + (self.log_prior_r)(lr)? + lr.ln())
    }

    /// One Gibbs-within-Metropolis sweep over (kᶜ, λᶜ, λʳ); returns whether
    /// the λʳ proposal was accepted.
    fn sweep(&self, rng: &mut StatRng, state: &mut (f64, f64), step: f64) -> Result<bool> {
        let (lambda_r, lambda_c) = *state;
        let k = self.k;
        let kf = k as f64;
        let p = lambda_c / (lambda_r + lambda_c);
        let kc = if k > NORMAL_APPROX_COUNT {
            let sd = (kf * p * (1.0 - p)).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            (kf * p + sd * z).round().clamp(0.0, kf) as u64
        } else {
            sample_binomial(rng, k, p)
        };
        let lambda_c = sample_gamma(rng, self.prior.alpha_c + kc as f64, self.prior.beta_c + self.d).max(1e-300);
        let kr = k - kc;
        let z: f64 = rng.sample(StandardNormal);
        let proposal = (lambda_r.ln() + step * z).exp();
        let mut accepted = false;
        let mut lambda_r = lambda_r;
        if proposal > 0.0 && proposal.is_finite() {
            let delta = self.log_target(proposal, kr)? - self.log_target(lambda_r, kr)?;
            if delta >= 0.0 || rng.random::<f64>().ln() < delta {
                lambda_r = proposal;
                accepted = true;
            }
        }
        *state = (lambda_r, lambda_c);
        Ok(accepted)
    }
}

fn run_chain(rng: &mut StatRng, sampler: &Sampler<'_>, settings: &McmcSettings) -> Result<ChainOutput> {
    let kf = sampler.k as f64;
    // Over-dispersed start around the data.
    let lambda_r = ((kf + 0.5) / sampler.d) * (rng.random::<f64>() * 2.0 - 1.0).exp();
    let lambda_c = sample_gamma(rng, sampler.prior.alpha_c, sampler.prior.beta_c).max(1e-300);
    let mut state = (lambda_r, lambda_c);
    let mut step = 1.0 / (kf + 1.0).sqrt() + 0.3;
    let kept = (settings.iterations - settings.warmup).div_ceil(settings.thin);
    let mut out = ChainOutput {
        lambda_r: Vec::with_capacity(kept),
        lambda_c: Vec::with_capacity(kept),
        accepted: 0,
        proposed: 0,
    };
    let mut window_accepted = 0usize;
    for it in 0..settings.iterations {
        let accepted = sampler.sweep(rng, &mut state, step)?;
        if it < settings.warmup {
            window_accepted += usize::from(accepted);
            if (it + 1) % ADAPT_WINDOW == 0 {
                let rate = window_accepted as f64 / ADAPT_WINDOW as f64;
                if !(0.3..=0.5).contains(&rate) {
                    step *= 0.6 + rate;
                }
                window_accepted = 0;
            }
        } else {
            out.accepted += usize::from(accepted);
            out.proposed += 1;
            if (it - settings.warmup) % settings.thin == 0 {
                out.lambda_r.push(state.0);
                out.lambda_c.push(state.1);
            }
        }
    }
    Ok(out)
}

fn sample_with_prior(
    k: u64,
    d: f64,
    prior: ContamPrior,
    settings: &McmcSettings,
    seed: u64,
    log_prior_r: &(dyn Fn(f64) -> Result<f64> + Sync),
) -> Result<PosteriorDraws> {
    settings.check()?;
    prior.check()?;
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::data(format!("size factor must be positive, got {d}")));
    }
    let mut draws = PosteriorDraws {
        lambda_r: Vec::new(),
        lambda_c: Vec::new(),
        acceptance_rate: 0.0,
        flags: Vec::new(),
    };
    if k > NORMAL_APPROX_COUNT {
        draws.flags.push(SamplerFlag::NormalApprox);
    }
    let (mut acc, mut prop) = (0usize, 0usize);
    for c in 0..settings.chains {
        let mut r = rng::stream(seed, c as u64);
        let sampler = Sampler { k, d, prior, log_prior_r };
        let out = run_chain(&mut r, &sampler, settings)?;
        draws.lambda_r.extend(out.lambda_r);
        draws.lambda_c.extend(out.lambda_c);
        acc += out.accepted;
        prop += out.proposed;
    }
    draws.acceptance_rate = acc as f64 / prop.max(1) as f64;
    Ok(draws)
}

/// Upper end of the tabulated reference-prior grid for a cell.
fn lambda_max(k: u64, d: f64) -> f64 {
    let kf = k as f64;
    (kf + 10.0 * kf.sqrt() + 20.0) * 4.0 / d
}

/// Posterior draws of (λʳ, λᶜ) for one cell under the reference prior.
pub fn sample_posterior(k: u64, d: f64, prior: ContamPrior, settings: &McmcSettings, seed: u64) -> Result<PosteriorDraws> {
    prior.check()?;
    let reference = ReferencePrior::new(d, prior, lambda_max(k, d))?;
    sample_with_prior(k, d, prior, settings, seed, &|l| reference.log_density(l))
}

/// Shortest interval containing ⌈level·n⌉ of the draws.
pub fn hpd_interval(draws: &[f64], level: f64) -> (f64, f64) {
    if draws.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let m = ((level * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (s[0], s[m - 1]);
    for i in 1..=n - m {
        if s[i + m - 1] - s[i] < best.1 - best.0 {
            best = (s[i], s[i + m - 1]);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub taxon_id: String,
    pub specimen_id: String,
    pub hpd_true: (f64, f64),
    pub hpd_contam: (f64, f64),
    pub is_contaminant: bool,
    pub n_draws: usize,
    pub acceptance_rate: f64,
    pub flags: Vec<SamplerFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecontamSettings {
    pub mcmc: McmcSettings,
    pub hpd_level: f64,
    /// Remove a taxon from every biological specimen when at least half of
    /// them call it contaminant, instead of zeroing individual cells.
    pub taxon_level: bool,
}

impl Default for DecontamSettings {
    fn default() -> Self {
        DecontamSettings {
            mcmc: McmcSettings::default(),
            hpd_level: 0.95,
            taxon_level: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecontamResult {
    pub summaries: Vec<PosteriorSummary>,
    pub cleaned: Dataset,
    pub priors: Vec<PriorEstimate>,
    /// Taxa called contaminant in at least one specimen (taxon level: in at
    /// least half).
    pub contaminant_taxa: Vec<String>,
    pub n_contaminant_cells: usize,
}

/// Median-of-ratios size factors over every specimen, falling back to the
/// pseudo-reference when no taxon is positive everywhere.
pub fn size_factor_reference(dataset: &Dataset) -> Result<Vec<f64>> {
    median_of_ratios(&dataset.counts, false).or_else(|_| median_of_ratios(&dataset.counts, true))
}

/// Runs the sampler for every (taxon, biological specimen) cell and zeroes
/// the cells called contaminant. Stored size factors are used when present.
pub fn call_contaminants(dataset: &Dataset, settings: &DecontamSettings, seed: u64) -> Result<DecontamResult> {
    dataset.ensure_valid()?;
    settings.mcmc.check()?;
    if !(settings.hpd_level > 0.0 && settings.hpd_level < 1.0) {
        return Err(Error::data(format!("HPD level must lie in (0, 1), got {}", settings.hpd_level)));
    }
    let controls = dataset.control_indices()?;
    if controls.len() < 2 {
        return Err(Error::precondition(format!(
            "contaminant calls need at least 2 negative controls, found {}",
            controls.len()
        )));
    }
    let bio = dataset.biological_indices()?;
    let d = match &dataset.size_factors {
        Some(d) => d.clone(),
        None => size_factor_reference(dataset)?,
    };
    let all_taxa: Vec<usize> = (0..dataset.counts.n_taxa()).collect();
    let control_table = dataset.counts.select(&all_taxa, &controls)?;
    let control_d: Vec<f64> = controls.iter().map(|&j| d[j]).collect();
    let priors = estimate_contam_prior(&control_table, &control_d)?;

    let cells: Vec<(usize, usize)> = all_taxa.iter().flat_map(|&i| bio.iter().map(move |&j| (i, j))).collect();
    let counts = &dataset.counts;
    let summaries: Vec<PosteriorSummary> = cells
        .par_iter()
        .map(|&(i, j)| {
            let k = counts.get(i, j);
            let cell_seed = rng::mix(rng::mix(seed, i as u64), j as u64);
            let mut summary = PosteriorSummary {
                taxon_id: counts.taxa_ids()[i].clone(),
                specimen_id: counts.specimen_ids()[j].clone(),
                hpd_true: (f64::NAN, f64::NAN),
                hpd_contam: (f64::NAN, f64::NAN),
                is_contaminant: false,
                n_draws: 0,
                acceptance_rate: f64::NAN,
                flags: vec![],
            };
            match sample_posterior(k, d[j], priors[i].prior, &settings.mcmc, cell_seed) {
                Ok(draws) => {
                    summary.hpd_true = hpd_interval(&draws.lambda_r, settings.hpd_level);
                    summary.hpd_contam = hpd_interval(&draws.lambda_c, settings.hpd_level);
                    summary.is_contaminant = summary.hpd_true.0 < summary.hpd_contam.1;
                    summary.n_draws = draws.lambda_r.len();
                    summary.acceptance_rate = draws.acceptance_rate;
                    summary.flags = draws.flags;
                }
                Err(_) => summary.flags.push(SamplerFlag::Failed),
            }
            summary
        })
        .collect();

    let mut values = counts.as_slice().to_vec();
    let n = counts.n_specimens();
    let nb = bio.len();
    let mut contaminant_taxa = Vec::new();
    for (i, taxon_cells) in summaries.chunks(nb.max(1)).enumerate().take(all_taxa.len()) {
        let called = taxon_cells.iter().filter(|s| s.is_contaminant).count();
        if settings.taxon_level {
            if nb > 0 && 2 * called >= nb {
                contaminant_taxa.push(counts.taxa_ids()[i].clone());
                for &j in &bio {
                    values[i * n + j] = 0;
                }
            }
        } else if called > 0 {
            contaminant_taxa.push(counts.taxa_ids()[i].clone());
            for (s, &j) in taxon_cells.iter().zip(&bio) {
                if s.is_contaminant {
                    values[i * n + j] = 0;
                }
            }
        }
    }
    let mut cleaned = dataset.clone();
    cleaned.counts = counts.with_counts(values)?;
    let n_contaminant_cells = summaries.iter().filter(|s| s.is_contaminant).count();
    Ok(DecontamResult {
        summaries,
        cleaned,
        priors,
        contaminant_taxa,
        n_contaminant_cells,
    })
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        format!("{x:?}")
    }
}

/// Report with columns taxon_id, specimen_id, L_r, U_r, L_c, U_c,
/// is_contaminant.
pub fn summaries_to_csv(summaries: &[PosteriorSummary]) -> String {
    let mut out = String::from("taxon_id,specimen_id,L_r,U_r,L_c,U_c,is_contaminant\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.taxon_id,
            s.specimen_id,
            fmt(s.hpd_true.0),
            fmt(s.hpd_true.1),
            fmt(s.hpd_contam.0),
            fmt(s.hpd_contam.1),
            s.is_contaminant
        ));
    }
    out
}
