//! Collapsed Gibbs sampler for latent Dirichlet allocation.
//!
//! Taxa are visited in the sorted order of their identifiers, so the chain
//! does not depend on the row order of the input table.

use rand::Rng;

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::rng::StatRng;
use crate::special::ln_gamma;

enum Layout {
    /// One topic label per token; tokens of a specimen are stored by taxon.
    Tokens {
        words: Vec<u32>,
        doc_start: Vec<usize>,
        z: Vec<u16>,
    },
    /// Topic counts per nonzero (specimen, taxon) cell; `cells` is sorted by
    /// specimen then taxon.
    Cells {
        cells: Vec<(u32, u32, u64)>,
        topic_counts: Vec<u64>,
    },
}

/// Sampler state: assignment counts n_jt, n_wt, n_t and the layout that
/// holds individual assignments.
pub struct CollapsedGibbs {
    t: usize,
    m: usize,
    n: usize,
    alpha: f64,
    gamma: f64,
    sizes: Vec<u64>,
    /// Internal taxon index → input row.
    order: Vec<usize>,
    n_jt: Vec<u64>,
    n_wt: Vec<u64>,
    n_t: Vec<u64>,
    layout: Layout,
    rng: StatRng,
    cum: Vec<f64>,
}

fn draw_topic(rng: &mut StatRng, cum: &mut [f64], nj: &[u64], nw: &[u64], nt: &[u64], alpha: f64, gamma: f64, mg: f64) -> usize {
    let mut total = 0.0;
    for (t, c) in cum.iter_mut().enumerate() {
        total += (nj[t] as f64 + alpha) * (nw[t] as f64 + gamma) / (nt[t] as f64 + mg);
        *c = total;
    }
    let u = rng.random::<f64>() * total;
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

impl CollapsedGibbs {
    /// Random initial assignments drawn from `rng`. `grouped` selects the
    /// per-cell representation, which samples the same posterior by random
    /// scan within each cell.
    pub fn new(counts: &CountTable, topics: usize, alpha: f64, gamma: f64, grouped: bool, mut rng: StatRng) -> Result<Self> {
        let (m, n) = (counts.n_taxa(), counts.n_specimens());
        if topics == 0 || topics > u16::MAX as usize {
            return Err(Error::precondition(format!("topic count {topics} is out of range")));
        }
        if !(alpha > 0.0 && alpha.is_finite() && gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::precondition("alpha and gamma must be positive"));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| counts.taxa_ids()[a].cmp(&counts.taxa_ids()[b]));
        let sizes: Vec<u64> = (0..n).map(|j| counts.column(j).iter().sum()).collect();
        let t = topics;
        let mut n_jt = vec![0u64; n * t];
        let mut n_wt = vec![0u64; m * t];
        let mut n_t = vec![0u64; t];
        let layout = if grouped {
            let mut cells = Vec::new();
            let mut topic_counts = Vec::new();
            for j in 0..n {
                for (w, &row) in order.iter().enumerate() {
                    let c = counts.get(row, j);
                    if c == 0 {
                        continue;
                    }
                    let start = topic_counts.len();
                    topic_counts.resize(start + t, 0);
                    for _ in 0..c {
                        let z = rng.random_range(0..t);
                        topic_counts[start + z] += 1;
                        n_jt[j * t + z] += 1;
                        n_wt[w * t + z] += 1;
                        n_t[z] += 1;
                    }
                    cells.push((j as u32, w as u32, c));
                }
            }
            Layout::Cells { cells, topic_counts }
        } else {
            let total: u64 = sizes.iter().sum();
            let mut words = Vec::with_capacity(total as usize);
            let mut z = Vec::with_capacity(total as usize);
            let mut doc_start = Vec::with_capacity(n + 1);
            for j in 0..n {
                doc_start.push(words.len());
                for (w, &row) in order.iter().enumerate() {
                    for _ in 0..counts.get(row, j) {
                        let k = rng.random_range(0..t);
                        words.push(w as u32);
                        z.push(k as u16);
                        n_jt[j * t + k] += 1;
                        n_wt[w * t + k] += 1;
                        n_t[k] += 1;
                    }
                }
            }
            doc_start.push(words.len());
            Layout::Tokens { words, doc_start, z }
        };
        Ok(CollapsedGibbs {
            t,
            m,
            n,
            alpha,
            gamma,
            sizes,
            order,
            n_jt,
            n_wt,
            n_t,
            layout,
            rng,
            cum: vec![0.0; t],
        })
    }

    /// One full scan: every token is resampled once (in expectation, for the
    /// grouped layout).
    pub fn sweep(&mut self) {
        let (t, alpha, gamma) = (self.t, self.alpha, self.gamma);
        let mg = self.m as f64 * gamma;
        let (n_jt, n_wt, n_t, rng, cum) = (&mut self.n_jt, &mut self.n_wt, &mut self.n_t, &mut self.rng, &mut self.cum);
        match &mut self.layout {
            Layout::Tokens { words, doc_start, z } => {
                for j in 0..self.n {
                    let nj = &mut n_jt[j * t..(j + 1) * t];
                    for idx in doc_start[j]..doc_start[j + 1] {
                        let w = words[idx] as usize;
                        let old = z[idx] as usize;
                        let nw = &mut n_wt[w * t..(w + 1) * t];
                        nj[old] -= 1;
                        nw[old] -= 1;
                        n_t[old] -= 1;
                        let new = draw_topic(rng, cum, nj, nw, n_t, alpha, gamma, mg);
                        nj[new] += 1;
                        nw[new] += 1;
                        n_t[new] += 1;
                        z[idx] = new as u16;
                    }
                }
            }
            Layout::Cells { cells, topic_counts } => {
                for (c, &(j, w, count)) in cells.iter().enumerate() {
                    let (j, w) = (j as usize, w as usize);
                    let nj = &mut n_jt[j * t..(j + 1) * t];
                    let nw = &mut n_wt[w * t..(w + 1) * t];
                    let tc = &mut topic_counts[c * t..(c + 1) * t];
                    for _ in 0..count {
                        let mut pick = rng.random_range(0..count);
                        let mut old = 0;
                        while pick >= tc[old] {
                            pick -= tc[old];
                            old += 1;
                        }
                        tc[old] -= 1;
                        nj[old] -= 1;
                        nw[old] -= 1;
                        n_t[old] -= 1;
                        let new = draw_topic(rng, cum, nj, nw, n_t, alpha, gamma, mg);
                        tc[new] += 1;
                        nj[new] += 1;
                        nw[new] += 1;
                        n_t[new] += 1;
                    }
                }
            }
        }
    }

    /// ln p(K | z) with β integrated out.
    pub fn log_likelihood(&self) -> f64 {
        let (t, m, g) = (self.t, self.m, self.gamma);
        let mg = m as f64 * g;
        let mut ll = t as f64 * (ln_gamma(mg) - m as f64 * ln_gamma(g));
        for k in 0..t {
            ll -= ln_gamma(self.n_t[k] as f64 + mg);
        }
        for &c in &self.n_wt {
            if c > 0 {
                ll += ln_gamma(c as f64 + g) - ln_gamma(g);
            }
        }
        ll
    }

    /// Token topic labels in canonical order (specimen, then taxon id); only
    /// available for the token layout.
    pub fn assignments(&self) -> Option<&[u16]> {
        match &self.layout {
            Layout::Tokens { z, .. } => Some(z),
            Layout::Cells { .. } => None,
        }
    }

    /// n_jt, specimen-major.
    pub fn specimen_topic_counts(&self) -> &[u64] {
        &self.n_jt
    }

    /// θ_jt = (n_jt + α) / (S_j + Tα), specimen-major, appended to `out`.
    pub fn push_theta(&self, out: &mut Vec<f64>) {
        let ta = self.t as f64 * self.alpha;
        for j in 0..self.n {
            let den = self.sizes[j] as f64 + ta;
            out.extend(self.n_jt[j * self.t..(j + 1) * self.t].iter().map(|&c| (c as f64 + self.alpha) / den));
        }
    }

    /// β_tw = (n_tw + γ) / (n_t + mγ), topic-major with taxa in input order,
    /// appended to `out`.
    pub fn push_beta(&self, out: &mut Vec<f64>) {
        let mg = self.m as f64 * self.gamma;
        let start = out.len();
        out.resize(start + self.t * self.m, 0.0);
        for k in 0..self.t {
            let den = self.n_t[k] as f64 + mg;
            for (w, &row) in self.order.iter().enumerate() {
                out[start + k * self.m + row] = (self.n_wt[w * self.t + k] as f64 + self.gamma) / den;
            }
        }
    }
}
