//! Posterior predictive check of the per-taxon maximum count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::rng;
use crate::special::sample_multinomial;

use super::TopicFit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcRow {
    pub taxon_id: String,
    /// G = max_j K_ij on the observed table.
    pub observed_max: u64,
    pub replicate_mean: f64,
    pub replicate_q05: f64,
    pub replicate_q95: f64,
    /// Fraction of replicates with G_rep ≥ G_obs.
    pub tail_probability: f64,
}

/// Indices of at most `max_draws` draws spread evenly over `total`.
fn spread(total: usize, max_draws: usize) -> Vec<usize> {
    if total <= max_draws {
        (0..total).collect()
    } else {
        (0..max_draws).map(|k| k * total / max_draws).collect()
    }
}

/// Replicates K̃_·j ~ Multinomial(S_j, Bθ_j) under up to `max_draws` pooled
/// posterior draws and compares the per-taxon maximum with `counts`, whose
/// taxa and specimens must match the fit.
pub fn posterior_predictive_check(fit: &TopicFit, counts: &CountTable, max_draws: usize, seed: u64) -> Result<Vec<PpcRow>> {
    if counts.taxa_ids() != fit.taxa_ids.as_slice() || counts.specimen_ids() != fit.specimen_ids.as_slice() {
        return Err(Error::data("count table taxa or specimens differ from the fitted model"));
    }
    if max_draws == 0 {
        return Err(Error::precondition("posterior predictive check needs at least one draw"));
    }
    let (n, t, m) = (fit.specimen_ids.len(), fit.n_topics, fit.taxa_ids.len());
    let sizes: Vec<u64> = (0..n).map(|j| counts.column(j).iter().sum()).collect();
    let per_chain = fit.draws_per_chain();
    let picks = spread(fit.chains.len() * per_chain, max_draws);
    let maxima: Vec<Vec<u64>> = picks
        .par_iter()
        .map(|&g| {
            let (c, d) = (g / per_chain, g % per_chain);
            let mut r = rng::stream(seed, g as u64);
            let theta = fit.theta_draw(c, d);
            let beta = fit.beta_draw(c, d);
            let mut best = vec![0u64; m];
            let mut probs = vec![0.0; m];
            let mut draw = vec![0u64; m];
            for j in 0..n {
                probs.iter_mut().for_each(|p| *p = 0.0);
                for k in 0..t {
                    let w = theta[j * t + k];
                    for (p, b) in probs.iter_mut().zip(&beta[k * m..(k + 1) * m]) {
                        *p += w * b;
                    }
                }
                sample_multinomial(&mut r, sizes[j], &probs, &mut draw);
                for (b, &x) in best.iter_mut().zip(&draw) {
                    *b = (*b).max(x);
                }
            }
            best
        })
        .collect();
    let reps = maxima.len() as f64;
    Ok((0..m)
        .map(|i| {
            let observed = counts.row(i).iter().copied().max().unwrap_or(0);
            let mut g: Vec<u64> = maxima.iter().map(|v| v[i]).collect();
            g.sort_unstable();
            let q = |p: f64| g[((p * (g.len() - 1) as f64).round() as usize).min(g.len() - 1)] as f64;
            PpcRow {
                taxon_id: fit.taxa_ids[i].clone(),
                observed_max: observed,
                replicate_mean: g.iter().sum::<u64>() as f64 / reps,
                replicate_q05: q(0.05),
                replicate_q95: q(0.95),
                tail_probability: g.iter().filter(|&&x| x >= observed).count() as f64 / reps,
            }
        })
        .collect())
}

pub fn ppc_to_csv(rows: &[PpcRow]) -> String {
    let mut out = String::from("taxon_id,observed_max,replicate_mean,replicate_q05,replicate_q95,tail_probability\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?}\n",
            r.taxon_id, r.observed_max, r.replicate_mean, r.replicate_q05, r.replicate_q95, r.tail_probability
        ));
    }
    out
}
