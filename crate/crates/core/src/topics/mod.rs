//! Latent Dirichlet allocation on count tables.
//!
//! Specimens are documents and reads are tokens: θ_j ~ Dirichlet_T(α),
//! β_t ~ Dirichlet_m(γ) and K_·j | S_j ~ Multinomial(S_j, Bθ_j). Fitting is
//! collapsed Gibbs sampling over token topic labels, one independent chain
//! per seed stream; chains are aligned to the first before diagnostics.

mod align;
mod diagnostics;
mod diff;
mod gibbs;
mod ppc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::rng;
use crate::special::sample_binomial;

pub use align::{align_chains, greedy_matching, pearson};
pub use diagnostics::{bulk_ess, split_rhat, Quantiles};
pub use diff::{differential_topics, library_size_factors, topic_count_table, topic_ids};
pub use gibbs::CollapsedGibbs;
pub use ppc::{posterior_predictive_check, ppc_to_csv, PpcRow};

/// Token count above which sampling switches to the per-cell layout.
pub const DEFAULT_MAX_TOKENS: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaSpec {
    pub topics: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Keep every `thin`-th post-warmup sweep.
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u64,
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.8
}
fn default_gamma() -> f64 {
    0.5
}
fn default_chains() -> usize {
    4
}
fn default_iters() -> usize {
    2000
}
fn default_warmup() -> usize {
    1000
}
fn default_thin() -> usize {
    1
}
fn default_max_tokens() -> u64 {
    DEFAULT_MAX_TOKENS
}

impl LdaSpec {
    pub fn new(topics: usize, seed: u64) -> Self {
        LdaSpec {
            topics,
            alpha: default_alpha(),
            gamma: default_gamma(),
            chains: default_chains(),
            iters: default_iters(),
            warmup: default_warmup(),
            thin: default_thin(),
            max_tokens: DEFAULT_MAX_TOKENS,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.topics == 0 {
            return Err(Error::precondition("topic count must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::precondition("alpha and gamma must be positive and finite"));
        }
        if self.chains == 0 || self.thin == 0 {
            return Err(Error::precondition("chains and thin must be positive"));
        }
        if self.warmup >= self.iters {
            return Err(Error::precondition(format!(
                "warmup ({}) must be smaller than iters ({})",
                self.warmup, self.iters
            )));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.iters - self.warmup).div_ceil(self.thin)
    }
}

/// Draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub n_draws: usize,
    /// draw × specimen × topic.
    pub theta: Vec<f64>,
    /// draw × topic × taxon.
    pub beta: Vec<f64>,
    /// ln p(K | z) after every sweep, warmup included.
    pub loglik: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicFlag {
    /// Sampled with the per-cell layout because of the token bound.
    GroupedSampler,
    /// Some R̂ values are undefined (constant draws).
    UndefinedRhat,
    /// Too few chains or draws for R̂ and ESS.
    DiagnosticsSkipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDiagnostics {
    /// specimen × topic.
    pub theta_rhat: Vec<f64>,
    pub theta_ess: Vec<f64>,
    /// topic × taxon.
    pub beta_rhat: Vec<f64>,
    pub beta_ess: Vec<f64>,
    pub rhat_summary: Option<Quantiles>,
    pub ess_summary: Option<Quantiles>,
    pub n_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicFit {
    pub spec: LdaSpec,
    pub taxa_ids: Vec<String>,
    pub specimen_ids: Vec<String>,
    pub n_topics: usize,
    pub grouped: bool,
    /// Aligned draws.
    pub chains: Vec<ChainDraws>,
    /// `permutations[c][r]` is chain c's original topic now at position r.
    pub permutations: Vec<Vec<usize>>,
    pub diagnostics: Option<TopicDiagnostics>,
    pub flags: Vec<TopicFlag>,
}

impl TopicFit {
    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.n_draws)
    }

    fn theta_size(&self) -> usize {
        self.specimen_ids.len() * self.n_topics
    }

    fn beta_size(&self) -> usize {
        self.n_topics * self.taxa_ids.len()
    }

    /// θ of one draw, specimen × topic.
    pub fn theta_draw(&self, chain: usize, draw: usize) -> &[f64] {
        let s = self.theta_size();
        &self.chains[chain].theta[draw * s..(draw + 1) * s]
    }

    /// β of one draw, topic × taxon.
    pub fn beta_draw(&self, chain: usize, draw: usize) -> &[f64] {
        let s = self.beta_size();
        &self.chains[chain].beta[draw * s..(draw + 1) * s]
    }

    fn pooled(&self, theta: bool, index: usize) -> Vec<f64> {
        let s = if theta { self.theta_size() } else { self.beta_size() };
        self.chains
            .iter()
            .flat_map(|c| {
                let v = if theta { &c.theta } else { &c.beta };
                (0..c.n_draws).map(move |d| v[d * s + index])
            })
            .collect()
    }

    /// Posterior median of θ over all chains, specimen × topic.
    pub fn theta_median(&self) -> Vec<f64> {
        (0..self.theta_size())
            .into_par_iter()
            .map(|i| {
                let mut v = self.pooled(true, i);
                v.sort_by(f64::total_cmp);
                let k = v.len();
                if k % 2 == 1 {
                    v[k / 2]
                } else {
                    0.5 * (v[k / 2 - 1] + v[k / 2])
                }
            })
            .collect()
    }

    /// Posterior mean of θ, specimen × topic.
    pub fn theta_mean(&self) -> Vec<f64> {
        (0..self.theta_size()).map(|i| mean(&self.pooled(true, i))).collect()
    }

    /// Posterior mean of β, topic × taxon.
    pub fn beta_mean(&self) -> Vec<f64> {
        (0..self.beta_size()).map(|i| mean(&self.pooled(false, i))).collect()
    }

    /// Median θ, one row per specimen.
    pub fn theta_csv(&self) -> String {
        let t = self.n_topics;
        let mut out = format!("specimen_id,{}\n", topic_ids(t).join(","));
        let med = self.theta_median();
        for (j, id) in self.specimen_ids.iter().enumerate() {
            let cells: Vec<String> = med[j * t..(j + 1) * t].iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!("{id},{}\n", cells.join(",")));
        }
        out
    }

    /// Mean β, one row per taxon.
    pub fn beta_csv(&self) -> String {
        let (t, m) = (self.n_topics, self.taxa_ids.len());
        let mut out = format!("taxon_id,{}\n", topic_ids(t).join(","));
        let b = self.beta_mean();
        for (w, id) in self.taxa_ids.iter().enumerate() {
            let cells: Vec<String> = (0..t).map(|k| format!("{:?}", b[k * m + w])).collect();
            out.push_str(&format!("{id},{}\n", cells.join(",")));
        }
        out
    }

    /// One row per parameter: `theta[specimen,Topic_t]` or `beta[Topic_t,taxon]`.
    pub fn diagnostics_csv(&self) -> Option<String> {
        let d = self.diagnostics.as_ref()?;
        let (t, m) = (self.n_topics, self.taxa_ids.len());
        let ids = topic_ids(t);
        let mut out = String::from("parameter,rhat,ess_bulk\n");
        for (j, s) in self.specimen_ids.iter().enumerate() {
            for k in 0..t {
                let i = j * t + k;
                out.push_str(&format!("theta[{s},{}],{:?},{:?}\n", ids[k], d.theta_rhat[i], d.theta_ess[i]));
            }
        }
        for k in 0..t {
            for (w, x) in self.taxa_ids.iter().enumerate() {
                let i = k * m + w;
                out.push_str(&format!("beta[{},{x}],{:?},{:?}\n", ids[k], d.beta_rhat[i], d.beta_ess[i]));
            }
        }
        Some(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<TopicFit> {
        Ok(serde_json::from_str(text)?)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn run_chain(counts: &CountTable, spec: &LdaSpec, grouped: bool, chain: usize) -> Result<ChainDraws> {
    let mut g = CollapsedGibbs::new(
        counts,
        spec.topics,
        spec.alpha,
        spec.gamma,
        grouped,
        rng::stream(spec.seed, chain as u64),
    )?;
    let keep = spec.draws_per_chain();
    let mut theta = Vec::with_capacity(keep * counts.n_specimens() * spec.topics);
    let mut beta = Vec::with_capacity(keep * spec.topics * counts.n_taxa());
    let mut loglik = Vec::with_capacity(spec.iters);
    for it in 0..spec.iters {
        g.sweep();
        loglik.push(g.log_likelihood());
        if it >= spec.warmup && (it - spec.warmup) % spec.thin == 0 {
            g.push_theta(&mut theta);
            g.push_beta(&mut beta);
        }
    }
    Ok(ChainDraws {
        n_draws: keep,
        theta,
        beta,
        loglik,
    })
}

/// Runs `spec.chains` independent chains, aligns their topics to the first
/// chain and computes diagnostics when there are ≥ 2 chains of ≥ 4 draws.
pub fn fit_lda(counts: &CountTable, spec: &LdaSpec) -> Result<TopicFit> {
    spec.check()?;
    let (m, n) = (counts.n_taxa(), counts.n_specimens());
    let mut total = 0u64;
    for j in 0..n {
        let s: u64 = counts.column(j).iter().sum();
        if s == 0 {
            return Err(Error::data(format!("specimen '{}' has no reads", counts.specimen_ids()[j])));
        }
        total += s;
    }
    if spec.topics as u64 >= total {
        return Err(Error::precondition(format!(
            "{} topics for {total} reads is degenerate",
            spec.topics
        )));
    }
    let grouped = total > spec.max_tokens;
    let mut chains = (0..spec.chains)
        .into_par_iter()
        .map(|c| run_chain(counts, spec, grouped, c))
        .collect::<Result<Vec<_>>>()?;
    let permutations = align_chains(&mut chains, n, spec.topics, m)?;
    let mut fit = TopicFit {
        spec: spec.clone(),
        taxa_ids: counts.taxa_ids().to_vec(),
        specimen_ids: counts.specimen_ids().to_vec(),
        n_topics: spec.topics,
        grouped,
        chains,
        permutations,
        diagnostics: None,
        flags: if grouped { vec![TopicFlag::GroupedSampler] } else { Vec::new() },
    };
    match diagnostics(&fit) {
        Ok(d) => {
            if d.n_undefined > 0 {
                fit.flags.push(TopicFlag::UndefinedRhat);
            }
            fit.diagnostics = Some(d);
        }
        Err(Error::Precondition(_)) => fit.flags.push(TopicFlag::DiagnosticsSkipped),
        Err(e) => return Err(e),
    }
    Ok(fit)
}

/// Split-R̂ and bulk ESS for every θ and β component of the aligned draws.
pub fn diagnostics(fit: &TopicFit) -> Result<TopicDiagnostics> {
    let draws = fit.draws_per_chain();
    if fit.chains.len() < 2 || draws < 4 {
        return Err(Error::precondition("diagnostics need at least 2 chains of 4 draws"));
    }
    let acf = diagnostics::Autocov::new(draws / 2);
    let one = |theta: bool, size: usize| -> (Vec<f64>, Vec<f64>) {
        (0..size)
            .into_par_iter()
            .map(|i| {
                let per: Vec<Vec<f64>> = fit
                    .chains
                    .iter()
                    .map(|c| {
                        let v = if theta { &c.theta } else { &c.beta };
                        (0..c.n_draws).map(|d| v[d * size + i]).collect()
                    })
                    .collect();
                let refs: Vec<&[f64]> = per.iter().map(Vec::as_slice).collect();
                diagnostics::rhat_and_ess(&acf, &refs)
            })
            .unzip()
    };
    let (theta_rhat, theta_ess) = one(true, fit.theta_size());
    let (beta_rhat, beta_ess) = one(false, fit.beta_size());
    let all_rhat: Vec<f64> = theta_rhat.iter().chain(&beta_rhat).copied().collect();
    let all_ess: Vec<f64> = theta_ess.iter().chain(&beta_ess).copied().collect();
    Ok(TopicDiagnostics {
        n_undefined: all_rhat.iter().filter(|v| v.is_nan()).count(),
        rhat_summary: Quantiles::of(&all_rhat),
        ess_summary: Quantiles::of(&all_ess),
        theta_rhat,
        theta_ess,
        beta_rhat,
        beta_ess,
    })
}

/// Held-out log-likelihood per token for each topic count, used to compare
/// choices of T. Each read is held out independently with probability
/// `holdout`; the score uses posterior-mean θ and β of the training fit.
pub fn heldout_scan(counts: &CountTable, topic_grid: &[usize], base: &LdaSpec, holdout: f64) -> Result<Vec<(usize, f64)>> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::precondition("holdout fraction must lie in (0, 1)"));
    }
    let (m, n) = (counts.n_taxa(), counts.n_specimens());
    let mut r = rng::stream(base.seed, u64::MAX);
    let mut train = Vec::with_capacity(m * n);
    let mut test = Vec::with_capacity(m * n);
    for &k in counts.as_slice() {
        let h = sample_binomial(&mut r, k, holdout);
        test.push(h);
        train.push(k - h);
    }
    let train_table = counts.with_counts(train)?;
    let n_test: u64 = test.iter().sum();
    if n_test == 0 {
        return Err(Error::data("no reads were held out"));
    }
    topic_grid
        .iter()
        .map(|&t| {
            let spec = LdaSpec { topics: t, ..base.clone() };
            let fit = fit_lda(&train_table, &spec)?;
            let (th, be) = (fit.theta_mean(), fit.beta_mean());
            let mut ll = 0.0;
            for i in 0..m {
                for j in 0..n {
                    let k = test[i * n + j];
                    if k > 0 {
                        let p: f64 = (0..t).map(|z| th[j * t + z] * be[z * m + i]).sum();
                        ll += k as f64 * p.ln();
                    }
                }
            }
            Ok((t, ll / n_test as f64))
        })
        .collect()
}
