//! Topic alignment across chains by greedy maximum correlation.

use crate::error::{Error, Result};

use super::ChainDraws;

/// Pearson correlation; None when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Greedy matching of candidate topics to reference topics, both given as
/// T×m row-major mean β. Returns `perm` with `perm[r]` the candidate topic
/// matched to reference topic r. Ties go to the smallest (r, c).
pub fn greedy_matching(reference: &[f64], candidate: &[f64], topics: usize) -> Result<Vec<usize>> {
    let m = reference.len() / topics;
    let row = |x: &[f64], t: usize| x[t * m..(t + 1) * m].to_vec();
    for (x, which) in [(reference, "reference"), (candidate, "candidate")] {
        if let Some(t) = (0..topics).find(|&t| row(x, t).iter().all(|&v| v == x[t * m])) {
            return Err(Error::numerical(format!(
                "{which} topic {} has a constant taxon distribution; correlation is undefined",
                t + 1
            )));
        }
    }
    let mut corr = vec![0.0; topics * topics];
    for r in 0..topics {
        for c in 0..topics {
            corr[r * topics + c] = pearson(&row(reference, r), &row(candidate, c)).unwrap_or(f64::NAN);
        }
    }
    let mut perm = vec![usize::MAX; topics];
    let mut used = vec![false; topics];
    for _ in 0..topics {
        let mut best: Option<(f64, usize, usize)> = None;
        for r in (0..topics).filter(|&r| perm[r] == usize::MAX) {
            for c in (0..topics).filter(|&c| !used[c]) {
                let v = corr[r * topics + c];
                if best.map_or(true, |(b, _, _)| v > b) {
                    best = Some((v, r, c));
                }
            }
        }
        let (_, r, c) = best.expect("an unmatched pair remains");
        perm[r] = c;
        used[c] = true;
    }
    Ok(perm)
}

/// Mean β over the draws of one chain, T×m.
pub(crate) fn mean_beta(chain: &ChainDraws, topics: usize, taxa: usize) -> Vec<f64> {
    let size = topics * taxa;
    let mut out = vec![0.0; size];
    for d in 0..chain.n_draws {
        for (o, v) in out.iter_mut().zip(&chain.beta[d * size..(d + 1) * size]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= chain.n_draws as f64);
    out
}

/// Reorders topics of chain 2.. to match chain 1, in place. Returns one
/// permutation per chain (identity for the first).
pub fn align_chains(chains: &mut [ChainDraws], specimens: usize, topics: usize, taxa: usize) -> Result<Vec<Vec<usize>>> {
    if chains.is_empty() {
        return Err(Error::precondition("no chains to align"));
    }
    let identity: Vec<usize> = (0..topics).collect();
    if topics == 1 {
        return Ok(vec![identity; chains.len()]);
    }
    let reference = mean_beta(&chains[0], topics, taxa);
    let mut perms = vec![identity.clone()];
    for chain in chains.iter_mut().skip(1) {
        let perm = greedy_matching(&reference, &mean_beta(chain, topics, taxa), topics)?;
        if perm != identity {
            apply(chain, &perm, specimens, topics, taxa);
        }
        perms.push(perm);
    }
    Ok(perms)
}

fn apply(chain: &mut ChainDraws, perm: &[usize], specimens: usize, topics: usize, taxa: usize) {
    for d in 0..chain.n_draws {
        let th = &mut chain.theta[d * specimens * topics..(d + 1) * specimens * topics];
        for j in 0..specimens {
            let old: Vec<f64> = th[j * topics..(j + 1) * topics].to_vec();
            for (r, &c) in perm.iter().enumerate() {
                th[j * topics + r] = old[c];
            }
        }
        let be = &mut chain.beta[d * topics * taxa..(d + 1) * topics * taxa];
        let old = be.to_vec();
        for (r, &c) in perm.iter().enumerate() {
            be[r * taxa..(r + 1) * taxa].copy_from_slice(&old[c * taxa..(c + 1) * taxa]);
        }
    }
}
