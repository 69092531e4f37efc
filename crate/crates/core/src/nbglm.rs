//! Two-group negative binomial GLM with Wald tests and Benjamini–Hochberg
//! adjustment.
//!
//! Model: log E[Y_j] = log d_j + b0 + b1·x_j with x_j ∈ {0, 1} and one
//! dispersion k per feature. The reference level (x = 0) is the first label
//! in sorted order; lfc = b1 / ln 2.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::nb;
use crate::special::normal_two_sided_p;

/// Clamp on |lfc| when one group is entirely zero.
pub const LFC_CLAMP: f64 = 30.0;

/// Step-up Benjamini–Hochberg over the finite entries; NaN entries stay NaN
/// and do not count towards the number of tests.
pub fn bh_adjust(pvalues: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..pvalues.len()).filter(|&i| !pvalues[i].is_nan()).collect();
    let m = idx.len() as f64;
    idx.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut out = vec![f64::NAN; pvalues.len()];
    let mut running = 1.0f64;
    for (rank, &i) in idx.iter().enumerate().rev() {
        let q = pvalues[i] * m / (rank + 1) as f64;
        running = running.min(q).min(1.0);
        out[i] = running.max(pvalues[i]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaldFlag {
    /// Zero in every specimen; statistics are NA.
    AllZero,
    /// One group is entirely zero; lfc clamped to ±30.
    Separation,
    /// Dispersion fit did not converge; moment estimate used.
    DispersionFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub feature_id: String,
    pub lfc: f64,
    pub lfc_se: f64,
    pub wts: f64,
    pub pvalue: f64,
    pub p_adj: f64,
    /// Base mean (size-factor-one scale) of the reference group.
    pub base_mean: f64,
    pub dispersion: f64,
    pub flags: Vec<WaldFlag>,
}

impl WaldRow {
    fn na(feature_id: String, flag: WaldFlag) -> Self {
        WaldRow {
            feature_id,
            lfc: f64::NAN,
            lfc_se: f64::NAN,
            wts: f64::NAN,
            pvalue: f64::NAN,
            p_adj: f64::NAN,
            base_mean: 0.0,
            dispersion: f64::NAN,
            flags: vec![flag],
        }
    }
}

/// Observed information for log μ_g: Σ m(1 + y/k)/(1 + m/k)² over the group.
fn observed_weight(y: &[u64], d: &[f64], group: &[usize], g: usize, mu: f64, k: f64) -> f64 {
    y.iter()
        .zip(d)
        .zip(group)
        .filter(|(_, &gj)| gj == g)
        .map(|((&yj, &dj), _)| {
            let m = mu * dj;
            let r = 1.0 + m / k;
            m * (1.0 + yj as f64 / k) / (r * r)
        })
        .sum()
}

/// Wald test for one feature. `group` holds 0 (reference) or 1.
pub fn wald_feature(feature_id: &str, y: &[u64], d: &[f64], group: &[usize]) -> WaldRow {
    let feature_id = feature_id.to_string();
    if y.iter().all(|&v| v == 0) {
        return WaldRow::na(feature_id, WaldFlag::AllZero);
    }
    let fit = nb::fit_profile(y, d, group, 2);
    let mut flags = Vec::new();
    let (mut mu, k) = if fit.converged {
        (fit.mu, fit.k)
    } else {
        flags.push(WaldFlag::DispersionFallback);
        let (_, k) = nb::moment_dispersion(y, d, group, 2);
        (nb::group_means(y, d, group, 2, k), k)
    };
    if mu[0] == 0.0 || mu[1] == 0.0 {
        flags.push(WaldFlag::Separation);
        let shift = LFC_CLAMP * std::f64::consts::LN_2;
        if mu[0] == 0.0 {
            mu[0] = mu[1] * (-shift).exp();
        } else {
            mu[1] = mu[0] * (-shift).exp();
        }
    }
    let lfc_nat = (mu[1] / mu[0]).ln();
    let w0 = observed_weight(y, d, group, 0, mu[0], k);
    let w1 = observed_weight(y, d, group, 1, mu[1], k);
    let se_nat = (1.0 / w0 + 1.0 / w1).sqrt();
    let lfc = lfc_nat / std::f64::consts::LN_2;
    let lfc_se = se_nat / std::f64::consts::LN_2;
    let wts = lfc / lfc_se;
    let pvalue = normal_two_sided_p(wts);
    WaldRow {
        feature_id,
        lfc,
        lfc_se,
        wts,
        pvalue,
        p_adj: pvalue,
        base_mean: mu[0],
        dispersion: k,
        flags,
    }
}

/// Two-level factor coded 0/1 with the sorted-first label as reference.
pub fn encode_two_levels<S: AsRef<str>>(labels: &[S]) -> Result<(Vec<usize>, [String; 2])> {
    let levels: BTreeSet<&str> = labels.iter().map(|s| s.as_ref()).collect();
    if levels.len() != 2 {
        return Err(Error::precondition(format!(
            "group factor must have exactly 2 levels, found {}",
            levels.len()
        )));
    }
    let mut it = levels.into_iter();
    let (a, b) = (it.next().expect("two"), it.next().expect("two"));
    let codes: Vec<usize> = labels.iter().map(|s| usize::from(s.as_ref() != a)).collect();
    for (g, name) in [a, b].iter().enumerate() {
        let n = codes.iter().filter(|&&c| c == g).count();
        if n < 2 {
            return Err(Error::precondition(format!("group '{name}' has {n} specimen(s); at least 2 required")));
        }
    }
    Ok((codes, [a.to_string(), b.to_string()]))
}

/// Per-feature Wald tests over all rows of `counts`, BH-adjusted across
/// features with a defined p-value.
pub fn wald_test<S: AsRef<str>>(counts: &CountTable, groups: &[S], size_factors: &[f64]) -> Result<Vec<WaldRow>> {
    let n = counts.n_specimens();
    if groups.len() != n || size_factors.len() != n {
        return Err(Error::data(format!(
            "{} specimens but {} group labels and {} size factors",
            n,
            groups.len(),
            size_factors.len()
        )));
    }
    if size_factors.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::data("size factors must be positive and finite"));
    }
    let (codes, _) = encode_two_levels(groups)?;
    let mut rows: Vec<WaldRow> = (0..counts.n_taxa())
        .into_par_iter()
        .map(|i| wald_feature(&counts.taxa_ids()[i], counts.row(i), size_factors, &codes))
        .collect();
    let p: Vec<f64> = rows.iter().map(|r| r.pvalue).collect();
    for (r, q) in rows.iter_mut().zip(bh_adjust(&p)) {
        r.p_adj = q;
    }
    Ok(rows)
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        format!("{x:?}")
    }
}

/// CSV in the `id,lfc,lfcSE,WTS,pvalue,p.adj` layout; `id_header` names the
/// first column.
pub fn rows_to_csv(rows: &[WaldRow], id_header: &str) -> String {
    let mut out = format!("{id_header},lfc,lfcSE,WTS,pvalue,p.adj\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.feature_id,
            fmt_num(r.lfc),
            fmt_num(r.lfc_se),
            fmt_num(r.wts),
            fmt_num(r.pvalue),
            fmt_num(r.p_adj)
        ));
    }
    out
}
