//! Per-taxon negative binomial fitting, parametric-bootstrap goodness of
//! fit, and the generative simulator used by the power studies.
//!
//! Dispersion convention: variance = μ + μ²/k, so k → ∞ is the Poisson
//! limit. This is the "exponent" k of the Anscombe transform.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CountTable, Dataset, SampleMetadata};
use crate::error::{Error, Result};
use crate::nb::{self, ProfileFit};
use crate::nbglm::bh_adjust;
use crate::rng::{self, StatRng};
use crate::special::{sample_nb, sample_poisson};
use crate::transforms::median_of_ratios;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NBParams {
    pub mu: f64,
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Likelihood still increasing at the dispersion cap: data are not
    /// over-dispersed.
    PoissonLimit,
    /// Newton did not converge in 100 iterations; moment estimates returned.
    MomentFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBFit {
    pub params: NBParams,
    pub iterations: usize,
    pub flags: Vec<FitFlag>,
}

fn check_fit_input(counts: &[u64], size_factors: &[f64]) -> Result<()> {
    if counts.len() != size_factors.len() {
        return Err(Error::data(format!(
            "{} counts but {} size factors",
            counts.len(),
            size_factors.len()
        )));
    }
    if counts.len() < 3 {
        return Err(Error::precondition("negative binomial fit needs at least 3 observations"));
    }
    if size_factors.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::data("size factors must be positive and finite"));
    }
    if counts.iter().all(|&k| k == 0) {
        return Err(Error::data("all counts are zero"));
    }
    Ok(())
}

fn fit_from_profile(fit: ProfileFit, counts: &[u64], size_factors: &[f64]) -> NBFit {
    let mut flags = Vec::new();
    if fit.poisson_limit {
        flags.push(FitFlag::PoissonLimit);
    }
    if fit.converged {
        return NBFit {
            params: NBParams { mu: fit.mu[0], k: fit.k },
            iterations: fit.iterations,
            flags,
        };
    }
    let group = vec![0usize; counts.len()];
    let (mean, k) = nb::moment_dispersion(counts, size_factors, &group, 1);
    flags.push(FitFlag::MomentFallback);
    NBFit {
        params: NBParams { mu: mean[0], k },
        iterations: fit.iterations,
        flags,
    }
}

/// Maximum-likelihood (μ, k) for K_j ~ NB(μ d_j, k), by Newton iteration on
/// ln k with μ profiled out.
pub fn fit_nb(counts: &[u64], size_factors: &[f64]) -> Result<NBFit> {
    check_fit_input(counts, size_factors)?;
    let group = vec![0usize; counts.len()];
    let fit = nb::fit_profile(counts, size_factors, &group, 1);
    Ok(fit_from_profile(fit, counts, size_factors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GofFlag {
    /// Fewer than two bins after merging, or a single distinct observed
    /// value; p is set to 1.
    DegenerateBins,
    PoissonLimit,
    MomentFallback,
    /// The taxon could not be fitted (e.g. all zeros); p is NA.
    FitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub taxon_id: String,
    pub mu: f64,
    pub k: f64,
    /// Pearson chi-square over merged count bins.
    pub statistic: f64,
    pub n_bins: usize,
    pub p_value: f64,
    pub p_adjusted: f64,
    pub n_sim: usize,
    pub observed_zeros: usize,
    pub expected_zeros: f64,
    /// Observed zeros exceed the NB expectation by more than two standard
    /// deviations.
    pub excess_zeros: bool,
    pub flags: Vec<GofFlag>,
}

/// Minimum expected count per bin.
pub const MIN_EXPECTED: f64 = 5.0;

struct Binned {
    statistic: f64,
    n_bins: usize,
    expected_zeros: f64,
    zero_variance: f64,
}

/// Pearson statistic with adjacent count values merged left to right until
/// each bin expects at least 5 observations; the remaining upper tail is
/// folded into the last bin.
fn pearson_binned(counts: &[u64], size_factors: &[f64], params: NBParams) -> Option<Binned> {
    let n = counts.len() as f64;
    let NBParams { mu, k } = params;
    // Group identical size factors.
    let mut ds: Vec<(f64, f64)> = Vec::new();
    for &d in size_factors {
        match ds.iter_mut().find(|(x, _)| *x == d) {
            Some((_, c)) => *c += 1.0,
            None => ds.push((d, 1.0)),
        }
    }
    let terms: Vec<(f64, f64, f64)> = ds
        .iter()
        .map(|&(d, mult)| {
            let m = mu * d;
            (mult, -k * (m / k).ln_1p(), (m / (m + k)).ln())
        })
        .collect();
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();

    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut cur_o, mut cur_e) = (0.0, 0.0);
    let mut seen_e = 0.0;
    let mut cursor = 0usize;
    let mut log_c = 0.0; // ln Γ(v+k) − ln Γ(k) − ln v!
    let (mut expected_zeros, mut zero_variance) = (0.0, 0.0);
    let mut v: u64 = 0;
    loop {
        let vf = v as f64;
        let mut e_v = 0.0;
        for &(mult, lp0, a) in &terms {
            let p = (lp0 + log_c + vf * a).exp();
            e_v += mult * p;
            if v == 0 {
                zero_variance += mult * p * (1.0 - p);
            }
        }
        if v == 0 {
            expected_zeros = e_v;
        }
        let mut o_v = 0.0;
        while cursor < sorted.len() && sorted[cursor] == v {
            o_v += 1.0;
            cursor += 1;
        }
        cur_o += o_v;
        cur_e += e_v;
        seen_e += e_v;
        if cur_e >= MIN_EXPECTED {
            bins.push((cur_o, cur_e));
            cur_o = 0.0;
            cur_e = 0.0;
        }
        if n - seen_e < MIN_EXPECTED || v > 50_000_000 {
            break;
        }
        log_c += ((vf + k) / (vf + 1.0)).ln();
        v += 1;
    }
    // Tail: everything above v.
    cur_o += (sorted.len() - cursor) as f64;
    cur_e += (n - seen_e).max(0.0);
    if cur_e > 0.0 || cur_o > 0.0 {
        if cur_e >= MIN_EXPECTED || bins.is_empty() {
            bins.push((cur_o, cur_e));
        } else {
            let last = bins.last_mut().expect("non-empty");
            last.0 += cur_o;
            last.1 += cur_e;
        }
    }
    let distinct = sorted.first() != sorted.last();
    if bins.len() < 2 || !distinct {
        return None;
    }
    let statistic = bins.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
    Some(Binned {
        statistic,
        n_bins: bins.len(),
        expected_zeros,
        zero_variance,
    })
}

fn simulated_statistic(rng: &mut StatRng, size_factors: &[f64], params: NBParams, buf: &mut Vec<u64>) -> f64 {
    buf.clear();
    buf.extend(size_factors.iter().map(|&d| sample_nb(rng, params.mu * d, params.k)));
    if buf.iter().all(|&y| y == 0) {
        return 0.0;
    }
    let group = vec![0usize; buf.len()];
    let fit = fit_from_profile(nb::fit_profile(buf, size_factors, &group, 1), buf, size_factors);
    pearson_binned(buf, size_factors, fit.params).map_or(0.0, |b| b.statistic)
}

/// Parametric-bootstrap chi-square goodness of fit to the negative binomial.
///
/// Each of `n_sim` replicates is drawn from the fitted model, refitted and
/// binned the same way as the data. p = (1 + #{sim ≥ obs}) / (n_sim + 1).
pub fn gof_nb(counts: &[u64], size_factors: &[f64], n_sim: usize, seed: u64) -> Result<GofResult> {
    let fit = fit_nb(counts, size_factors)?;
    let mut flags: Vec<GofFlag> = fit
        .flags
        .iter()
        .map(|f| match f {
            FitFlag::PoissonLimit => GofFlag::PoissonLimit,
            FitFlag::MomentFallback => GofFlag::MomentFallback,
        })
        .collect();
    let observed_zeros = counts.iter().filter(|&&y| y == 0).count();
    let params = fit.params;
    let p0: Vec<f64> = size_factors
        .iter()
        .map(|&d| nb::ll_obs(0, params.mu * d, params.k).exp())
        .collect();
    let expected_zeros: f64 = p0.iter().sum();
    let zero_sd = p0.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt();
    let excess_zeros = observed_zeros as f64 > expected_zeros + 2.0 * zero_sd;

    let mut result = GofResult {
        taxon_id: String::new(),
        mu: params.mu,
        k: params.k,
        statistic: f64::NAN,
        n_bins: 0,
        p_value: 1.0,
        p_adjusted: 1.0,
        n_sim,
        observed_zeros,
        expected_zeros,
        excess_zeros,
        flags: Vec::new(),
    };
    let Some(observed) = pearson_binned(counts, size_factors, params) else {
        flags.push(GofFlag::DegenerateBins);
        result.flags = flags;
        return Ok(result);
    };
    debug_assert!((observed.expected_zeros - expected_zeros).abs() < 1e-6 * (1.0 + expected_zeros));
    let _ = observed.zero_variance;
    let mut rng = rng::stream(seed, 0);
    let mut buf = Vec::with_capacity(counts.len());
    let exceed = (0..n_sim)
        .filter(|_| simulated_statistic(&mut rng, size_factors, params, &mut buf) >= observed.statistic)
        .count();
    result.statistic = observed.statistic;
    result.n_bins = observed.n_bins;
    result.p_value = (exceed + 1) as f64 / (n_sim + 1) as f64;
    result.p_adjusted = result.p_value;
    result.flags = flags;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub results: Vec<GofResult>,
    /// Fraction of fitted taxa with more zeros than the NB predicts.
    pub excess_zero_fraction: f64,
}

/// Options for [`gof_all`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GofOptions {
    /// Fit NB(μ d_j, k) with the dataset's size factors (or median-of-ratios
    /// estimates when absent). When false every d_j = 1.
    pub use_size_factors: bool,
}

impl Default for GofOptions {
    fn default() -> Self {
        GofOptions { use_size_factors: true }
    }
}

/// Size factors for the given columns: stored ones when present, otherwise
/// median-of-ratios (with the pseudo-reference fallback) on those columns.
pub fn size_factors_for(dataset: &Dataset, columns: &[usize]) -> Result<Vec<f64>> {
    if let Some(d) = &dataset.size_factors {
        return Ok(columns.iter().map(|&j| d[j]).collect());
    }
    let all_taxa: Vec<usize> = (0..dataset.counts.n_taxa()).collect();
    let sub = dataset.counts.select(&all_taxa, columns)?;
    median_of_ratios(&sub, false).or_else(|_| median_of_ratios(&sub, true))
}

/// Goodness of fit for every taxon over the biological specimens, with
/// Benjamini–Hochberg adjustment across taxa. Per-taxon failures are
/// flagged and never abort the batch.
pub fn gof_all(dataset: &Dataset, n_sim: usize, seed: u64, options: GofOptions) -> Result<GofReport> {
    dataset.ensure_valid()?;
    let bio = dataset.biological_indices()?;
    let d = if options.use_size_factors {
        size_factors_for(dataset, &bio)?
    } else {
        vec![1.0; bio.len()]
    };
    let counts = &dataset.counts;
    let mut results: Vec<GofResult> = (0..counts.n_taxa())
        .into_par_iter()
        .map(|i| {
            let y: Vec<u64> = bio.iter().map(|&j| counts.get(i, j)).collect();
            let taxon_id = counts.taxa_ids()[i].clone();
            match gof_nb(&y, &d, n_sim, rng::mix(seed, i as u64)) {
                Ok(r) => GofResult { taxon_id, ..r },
                Err(_) => GofResult {
                    taxon_id,
                    mu: f64::NAN,
                    k: f64::NAN,
                    statistic: f64::NAN,
                    n_bins: 0,
                    p_value: f64::NAN,
                    p_adjusted: f64::NAN,
                    n_sim,
                    observed_zeros: y.iter().filter(|&&v| v == 0).count(),
                    expected_zeros: f64::NAN,
                    excess_zeros: false,
                    flags: vec![GofFlag::FitFailed],
                },
            }
        })
        .collect();
    let p: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    for (r, q) in results.iter_mut().zip(bh_adjust(&p)) {
        r.p_adjusted = q;
    }
    let fitted: Vec<&GofResult> = results.iter().filter(|r| !r.flags.contains(&GofFlag::FitFailed)).collect();
    let excess_zero_fraction = if fitted.is_empty() {
        0.0
    } else {
        fitted.iter().filter(|r| r.excess_zeros).count() as f64 / fitted.len() as f64
    };
    Ok(GofReport {
        results,
        excess_zero_fraction,
    })
}

/// One simulated taxon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTaxon {
    pub id: String,
    pub mu: f64,
    pub k: f64,
    /// Multiplier on μ for every group after the first.
    #[serde(default = "one")]
    pub fold_change: f64,
    /// Contaminant intensity λᶜ, added as Poisson(λᶜ d_j) to every specimen
    /// including negative controls.
    #[serde(default)]
    pub contamination: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGroup {
    pub name: String,
    pub n: usize,
}

/// Distribution of per-specimen size factors d_j.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LibraryModel {
    /// Every specimen gets the same factor.
    Fixed { size_factor: f64 },
    /// d_j = L_j / mean with L_j ~ NB(mean, k) (floored at 1 read).
    NegativeBinomial { mean: f64, k: f64 },
}

impl Default for LibraryModel {
    fn default() -> Self {
        LibraryModel::Fixed { size_factor: 1.0 }
    }
}

/// A simulation scenario; see the repository README for the JSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub groups: Vec<SimGroup>,
    pub taxa: Vec<SimTaxon>,
    #[serde(default)]
    pub library: LibraryModel,
    /// Number of negative controls appended after the biological specimens.
    #[serde(default)]
    pub n_controls: usize,
    /// Size factor of the negative controls.
    #[serde(default = "one")]
    pub control_size_factor: f64,
    /// (a, b): the signal generated for taxon a is reported under b's
    /// identifier in switched specimens, and a is zero there. b's own
    /// parameters are not used; b is zero in unswitched specimens.
    #[serde(default)]
    pub switch_pairs: Vec<(String, String)>,
    /// When absent, every specimen of the second and later groups is
    /// switched. When given, this fraction of each group (chosen at random)
    /// is switched, independently of group membership.
    #[serde(default)]
    pub switch_fraction: Option<f64>,
    pub seed: u64,
}

impl SimScenario {
    fn check(&self) -> Result<Vec<(usize, usize)>> {
        if self.groups.is_empty() || self.groups.iter().all(|g| g.n == 0) {
            return Err(Error::data("scenario has no specimens"));
        }
        if self.taxa.is_empty() {
            return Err(Error::data("scenario has no taxa"));
        }
        for t in &self.taxa {
            if !(t.mu.is_finite() && t.mu >= 0.0 && t.k.is_finite() && t.k > 0.0) {
                return Err(Error::data(format!("taxon '{}' has invalid NB parameters", t.id)));
            }
            if !(t.fold_change.is_finite() && t.fold_change >= 0.0 && t.contamination.is_finite() && t.contamination >= 0.0) {
                return Err(Error::data(format!("taxon '{}' has invalid effect or contamination", t.id)));
            }
        }
        if let Some(f) = self.switch_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::data("switch_fraction must lie in [0, 1]"));
            }
        }
        let index = |id: &str| {
            self.taxa
                .iter()
                .position(|t| t.id == id)
                .ok_or_else(|| Error::data(format!("switch pair references unknown taxon '{id}'")))
        };
        let mut used = HashSet::new();
        let mut pairs = Vec::new();
        for (a, b) in &self.switch_pairs {
            let (ia, ib) = (index(a)?, index(b)?);
            if ia == ib {
                return Err(Error::data(format!("switch pair ({a}, {b}) must name two distinct taxa")));
            }
            if !used.insert(ia) || !used.insert(ib) {
                return Err(Error::data(format!("taxon in switch pair ({a}, {b}) is already switched")));
            }
            pairs.push((ia, ib));
        }
        Ok(pairs)
    }
}

/// Draws a dataset from a scenario. Streams: one per taxon for counts, one
/// for library sizes and one for choosing switched specimens, so results do
/// not depend on evaluation order.
pub fn simulate(scenario: &SimScenario) -> Result<Dataset> {
    let pairs = scenario.check()?;
    let seed = scenario.seed;
    let n_bio: usize = scenario.groups.iter().map(|g| g.n).sum();
    let n = n_bio + scenario.n_controls;

    let mut group_of = Vec::with_capacity(n_bio);
    for (g, grp) in scenario.groups.iter().enumerate() {
        group_of.extend(std::iter::repeat_n(g, grp.n));
    }

    let mut lib_rng = rng::stream(seed, u64::MAX);
    let mut d: Vec<f64> = (0..n_bio)
        .map(|_| match scenario.library {
            LibraryModel::Fixed { size_factor } => size_factor,
            LibraryModel::NegativeBinomial { mean, k } => sample_nb(&mut lib_rng, mean, k).max(1) as f64 / mean,
        })
        .collect();
    d.extend(std::iter::repeat_n(scenario.control_size_factor, scenario.n_controls));
    if d.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
        return Err(Error::data("library model produced a non-positive size factor"));
    }

    let switched: Vec<bool> = match scenario.switch_fraction {
        None => group_of.iter().map(|&g| g > 0).collect(),
        Some(f) => {
            let mut pick_rng = rng::stream(seed, u64::MAX - 1);
            let mut flags = vec![false; n_bio];
            let mut start = 0;
            for grp in &scenario.groups {
                let take = (f * grp.n as f64).round() as usize;
                for x in rand::seq::index::sample(&mut pick_rng, grp.n, take) {
                    flags[start + x] = true;
                }
                start += grp.n;
            }
            flags
        }
    };

    // Per taxon: (signal, contamination) per specimen.
    let parts: Vec<Vec<(u64, u64)>> = scenario
        .taxa
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = rng::stream(seed, i as u64);
            (0..n)
                .map(|j| {
                    let signal = if j < n_bio {
                        let fc = if group_of[j] > 0 { t.fold_change } else { 1.0 };
                        sample_nb(&mut r, t.mu * fc * d[j], t.k)
                    } else {
                        0
                    };
                    (signal, sample_poisson(&mut r, t.contamination * d[j]))
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<Vec<u64>> = parts.iter().map(|p| p.iter().map(|&(s, c)| s + c).collect()).collect();
    for &(a, b) in &pairs {
        for j in 0..n {
            let (sig_a, con_a) = parts[a][j];
            let con_b = parts[b][j].1;
            if j < n_bio && switched[j] {
                rows[a][j] = con_a;
                rows[b][j] = sig_a + con_b;
            } else {
                rows[a][j] = sig_a + con_a;
                rows[b][j] = con_b;
            }
        }
    }

    let taxa_ids: Vec<String> = scenario.taxa.iter().map(|t| t.id.clone()).collect();
    let mut specimen_ids: Vec<String> = (0..n_bio).map(|j| format!("S{:03}", j + 1)).collect();
    specimen_ids.extend((0..scenario.n_controls).map(|l| format!("NC{:02}", l + 1)));
    let counts = CountTable::from_rows(taxa_ids, specimen_ids.clone(), rows)?;
    let mut samples: Vec<SampleMetadata> = specimen_ids[..n_bio]
        .iter()
        .zip(&group_of)
        .map(|(id, &g)| SampleMetadata::biological(id.clone()).with_group(scenario.groups[g].name.clone()))
        .collect();
    samples.extend(specimen_ids[n_bio..].iter().map(|id| SampleMetadata::negative_control(id.clone())));
    Ok(Dataset {
        counts,
        samples,
        taxonomy: None,
        tree: None,
        size_factors: Some(d),
    })
}
