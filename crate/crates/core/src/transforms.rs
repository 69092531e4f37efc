//! Library-size scaling and the variance-stabilizing / rank transforms.

use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::genmodel::NBParams;

/// Offset used by the negative binomial Anscombe transform.
pub const ANSCOMBE_C: f64 = 3.0 / 8.0;

/// Dispersions at or below this are clamped before the Anscombe transform.
pub const ANSCOMBE_MIN_K: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformTag {
    Anscombe,
    TruncatedRank,
    PresenceAbsence,
    Scaled,
}

/// Parameters that, together with the source table, re-derive the values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Per-taxon dispersion actually used (after clamping).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size_factors: Option<Vec<f64>>,
    /// Taxa whose dispersion had to be clamped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped_taxa: Vec<String>,
}

/// Real-valued table with the shape and identifiers of its source counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedTable {
    pub taxa_ids: Vec<String>,
    pub specimen_ids: Vec<String>,
    /// Row-major taxa × specimens.
    pub values: Vec<f64>,
    pub tag: TransformTag,
    pub params: TransformParams,
}

impl TransformedTable {
    fn from_fn(counts: &CountTable, tag: TransformTag, params: TransformParams, f: impl Fn(usize, usize, u64) -> f64) -> Self {
        let n = counts.n_specimens();
        let values = counts
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &k)| f(idx / n, idx % n, k))
            .collect();
        TransformedTable {
            taxa_ids: counts.taxa_ids().to_vec(),
            specimen_ids: counts.specimen_ids().to_vec(),
            values,
            tag,
            params,
        }
    }

    /// Raw counts as reals (scaling by unit factors).
    pub fn from_counts(counts: &CountTable) -> Self {
        Self::from_fn(counts, TransformTag::Scaled, TransformParams::default(), |_, _, k| k as f64)
    }

    pub fn n_taxa(&self) -> usize {
        self.taxa_ids.len()
    }

    pub fn n_specimens(&self) -> usize {
        self.specimen_ids.len()
    }

    #[inline]
    pub fn get(&self, taxon: usize, specimen: usize) -> f64 {
        self.values[taxon * self.specimen_ids.len() + specimen]
    }

    pub fn column(&self, specimen: usize) -> Vec<f64> {
        (0..self.n_taxa()).map(|i| self.get(i, specimen)).collect()
    }

    /// CSV with a `taxon_id` header column, values at full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("taxon_id");
        for s in &self.specimen_ids {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (i, t) in self.taxa_ids.iter().enumerate() {
            out.push_str(t);
            for j in 0..self.n_specimens() {
                out.push(',');
                out.push_str(&format!("{:?}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median-of-ratios size factors, normalized to geometric mean 1.
///
/// The reference for each taxon is the geometric mean of its counts over
/// specimens, using only taxa positive in every specimen. With
/// `pseudo_reference`, taxa with any positive count contribute, their
/// reference is computed over positive entries and zero cells are skipped.
pub fn median_of_ratios(counts: &CountTable, pseudo_reference: bool) -> Result<Vec<f64>> {
    let (m, n) = (counts.n_taxa(), counts.n_specimens());
    let mut log_ref = vec![f64::NAN; m];
    for (i, lr) in log_ref.iter_mut().enumerate() {
        let row = counts.row(i);
        let positive: Vec<f64> = row.iter().filter(|&&k| k > 0).map(|&k| (k as f64).ln()).collect();
        if positive.len() == n || (pseudo_reference && !positive.is_empty()) {
            *lr = positive.iter().sum::<f64>() / positive.len() as f64;
        }
    }
    if log_ref.iter().all(|v| v.is_nan()) {
        return Err(Error::data(
            "no taxon is positive in every specimen; use the pseudo-reference option",
        ));
    }
    let mut log_d = Vec::with_capacity(n);
    for j in 0..n {
        let mut ratios: Vec<f64> = (0..m)
            .filter(|&i| !log_ref[i].is_nan() && counts.get(i, j) > 0)
            .map(|i| ((counts.get(i, j) as f64).ln() - log_ref[i]).exp())
            .collect();
        if ratios.is_empty() {
            return Err(Error::data(format!(
                "specimen '{}' shares no positive taxon with the reference",
                counts.specimen_ids()[j]
            )));
        }
        log_d.push(median(&mut ratios).ln());
    }
    let centre = log_d.iter().sum::<f64>() / n as f64;
    Ok(log_d.into_iter().map(|l| (l - centre).exp()).collect())
}

/// K*_ij = asinh(sqrt((K_ij + c) / (k_i − 2c))), c = 3/8.
///
/// When `size_factors` is given the counts are divided by them first.
/// Dispersions k ≤ 1 are clamped to 1 + 1e-6 and the taxon is recorded.
pub fn anscombe(counts: &CountTable, nb: &[NBParams], size_factors: Option<&[f64]>) -> Result<TransformedTable> {
    if nb.len() != counts.n_taxa() {
        return Err(Error::data(format!(
            "{} dispersion estimates for {} taxa",
            nb.len(),
            counts.n_taxa()
        )));
    }
    if let Some(d) = size_factors {
        check_size_factors(counts, d)?;
    }
    let mut clamped = Vec::new();
    let ks: Vec<f64> = nb
        .iter()
        .zip(counts.taxa_ids())
        .map(|(p, id)| {
            if p.k <= 1.0 {
                clamped.push(id.clone());
                ANSCOMBE_MIN_K
            } else {
                p.k
            }
        })
        .collect();
    let params = TransformParams {
        c: Some(ANSCOMBE_C),
        k: Some(ks.clone()),
        size_factors: size_factors.map(<[f64]>::to_vec),
        clamped_taxa: clamped,
        ..TransformParams::default()
    };
    Ok(TransformedTable::from_fn(counts, TransformTag::Anscombe, params, |i, j, k| {
        let x = size_factors.map_or(k as f64, |d| k as f64 / d[j]);
        anscombe_value(x, ks[i])
    }))
}

#[inline]
pub fn anscombe_value(x: f64, k: f64) -> f64 {
    ((x + ANSCOMBE_C) / (k - 2.0 * ANSCOMBE_C)).sqrt().asinh()
}

/// Within-specimen ranks (ascending, ties averaged), then max(rank − t, 1).
pub fn truncated_rank(counts: &CountTable, threshold: usize) -> Result<TransformedTable> {
    let m = counts.n_taxa();
    if threshold >= m {
        return Err(Error::data(format!("rank threshold {threshold} must be below the number of taxa ({m})")));
    }
    let n = counts.n_specimens();
    let mut values = vec![0.0; m * n];
    for j in 0..n {
        let col = counts.column(j);
        let ranks = average_ranks(&col);
        for (i, r) in ranks.into_iter().enumerate() {
            values[i * n + j] = (r - threshold as f64).max(1.0);
        }
    }
    Ok(TransformedTable {
        taxa_ids: counts.taxa_ids().to_vec(),
        specimen_ids: counts.specimen_ids().to_vec(),
        values,
        tag: TransformTag::TruncatedRank,
        params: TransformParams {
            threshold: Some(threshold),
            ..TransformParams::default()
        },
    })
}

/// 1-based ascending ranks with ties replaced by their average rank.
pub fn average_ranks<T: PartialOrd + Copy>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("comparable values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

/// B_ij = 1 if K_ij ≥ τ, else 0.
pub fn presence_absence(counts: &CountTable, tau: u64) -> Result<TransformedTable> {
    if tau < 1 {
        return Err(Error::data("presence threshold must be at least 1"));
    }
    let params = TransformParams {
        tau: Some(tau),
        ..TransformParams::default()
    };
    Ok(TransformedTable::from_fn(counts, TransformTag::PresenceAbsence, params, |_, _, k| {
        if k >= tau {
            1.0
        } else {
            0.0
        }
    }))
}

fn check_size_factors(counts: &CountTable, d: &[f64]) -> Result<()> {
    if d.len() != counts.n_specimens() {
        return Err(Error::data(format!(
            "{} size factors for {} specimens",
            d.len(),
            counts.n_specimens()
        )));
    }
    if let Some(j) = d.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::data(format!(
            "size factor for '{}' is not positive",
            counts.specimen_ids()[j]
        )));
    }
    Ok(())
}

/// K_ij / d_j.
pub fn scale_by_size_factors(counts: &CountTable, d: &[f64]) -> Result<TransformedTable> {
    check_size_factors(counts, d)?;
    let params = TransformParams {
        size_factors: Some(d.to_vec()),
        ..TransformParams::default()
    };
    Ok(TransformedTable::from_fn(counts, TransformTag::Scaled, params, |_, j, k| k as f64 / d[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::special::sample_nb;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: Vec<Vec<u64>>) -> CountTable {
        let (m, n) = (rows.len(), rows[0].len());
        CountTable::from_rows(
            (0..m).map(|i| format!("t{i}")).collect(),
            (0..n).map(|j| format!("s{j}")).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn tripled_column_gives_sqrt3() {
        let d = median_of_ratios(&table(vec![vec![2, 6], vec![5, 15], vec![7, 21]]), false).unwrap();
        assert!((d[0] - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((d[1] - 3f64.sqrt()).abs() < 1e-12);
        assert!((d[1] / d[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_columns_give_unit_factors() {
        let d = median_of_ratios(&table(vec![vec![4, 4, 4], vec![9, 9, 9]]), false).unwrap();
        assert!(d.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_rows_need_pseudo_reference() {
        let t = table(vec![vec![0, 4], vec![3, 0]]);
        assert!(median_of_ratios(&t, false).unwrap_err().to_string().contains("pseudo-reference"));
        let d = median_of_ratios(&t, true).unwrap();
        assert!((d[0] * d[1] - 1.0).abs() < 1e-12);
    }

    /// Direct definition: reference per row over all specimens, per-column median
    /// of ratios, divide by the geometric mean of the result.
    fn mor_oracle(rows: &[Vec<u64>]) -> Vec<f64> {
        let n = rows[0].len();
        let refs: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|&k| k as f64).product::<f64>().powf(1.0 / n as f64))
            .collect();
        let raw: Vec<f64> = (0..n)
            .map(|j| {
                let mut q: Vec<f64> = rows.iter().zip(&refs).map(|(r, g)| r[j] as f64 / g).collect();
                q.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let h = q.len() / 2;
                if q.len() % 2 == 1 { q[h] } else { (q[h - 1] + q[h]) / 2.0 }
            })
            .collect();
        let gm = raw.iter().product::<f64>().powf(1.0 / n as f64);
        raw.iter().map(|r| r / gm).collect()
    }

    #[test]
    fn median_of_ratios_matches_direct_definition() {
        let mut r = rng::stream(11, 0);
        let rows: Vec<Vec<u64>> = (0..30).map(|_| (0..6).map(|_| r.random_range(1..200u64)).collect()).collect();
        let got = median_of_ratios(&table(rows.clone()), false).unwrap();
        for (a, b) in got.iter().zip(mor_oracle(&rows)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn anscombe_formula_and_monotone() {
        let t = table(vec![vec![0, 5, 6]]);
        let out = anscombe(&t, &[NBParams { mu: 3.0, k: 2.0 }], None).unwrap();
        assert!((out.get(0, 0) - 0.3f64.sqrt().asinh()).abs() < 1e-12);
        assert!((out.get(0, 0) - 0.523_5).abs() < 1e-4);
        assert!(out.get(0, 2) > out.get(0, 1));
        let clamped = anscombe(&t, &[NBParams { mu: 3.0, k: 0.5 }], None).unwrap();
        assert_eq!(clamped.params.clamped_taxa, vec!["t0".to_string()]);
        assert!(clamped.values.iter().all(|v| v.is_finite()));
        assert!(anscombe(&t, &[], None).is_err());
    }

    #[test]
    fn anscombe_variance_near_trigamma_limit() {
        let mut r = rng::stream(3, 0);
        let (mu, k) = (100.0, 10.0);
        let xs: Vec<f64> = (0..100_000).map(|_| anscombe_value(sample_nb(&mut r, mu, k) as f64, k)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let target = 1.0 / (4.0 * (k - 0.5));
        assert!((var / target - 1.0).abs() < 0.15, "var {var} target {target}");
    }

    #[test]
    fn truncated_rank_worked_example() {
        // 1000 taxa with distinct abundances, threshold 330.
        let rows: Vec<Vec<u64>> = (0..1000).map(|i| vec![i as u64 + 1]).collect();
        let out = truncated_rank(&table(rows), 330).unwrap();
        assert_eq!(out.get(999, 0), 670.0);
        assert_eq!((0..1000).filter(|&i| out.get(i, 0) == 1.0).count(), 331);
        assert!(truncated_rank(&table(vec![vec![1], vec![2]]), 2).is_err());
    }

    #[test]
    fn truncated_rank_t0_is_permutation() {
        let out = truncated_rank(&table(vec![vec![5], vec![1], vec![9], vec![3]]), 0).unwrap();
        let mut v = out.column(0);
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn presence_absence_examples() {
        let t = table(vec![vec![2, 1, 0, 7]]);
        assert_eq!(presence_absence(&t, 2).unwrap().values, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(presence_absence(&t, 1).unwrap().values, vec![1.0, 1.0, 0.0, 1.0]);
        assert!(presence_absence(&t, 0).is_err());
    }

    #[test]
    fn scaling_examples() {
        let t = table(vec![vec![4, 6], vec![2, 8]]);
        assert_eq!(scale_by_size_factors(&t, &[1.0, 1.0]).unwrap().values, vec![4.0, 6.0, 2.0, 8.0]);
        assert_eq!(scale_by_size_factors(&t, &[1.0, 2.0]).unwrap().values, vec![4.0, 3.0, 2.0, 4.0]);
        assert!(scale_by_size_factors(&t, &[1.0]).is_err());
    }

    /// Sort-and-clamp oracle with explicit tie scan.
    fn rank_oracle(col: &[u64], t: usize) -> Vec<f64> {
        col.iter()
            .map(|&x| {
                let below = col.iter().filter(|&&y| y < x).count() as f64;
                let equal = col.iter().filter(|&&y| y == x).count() as f64;
                let rank = below + (equal + 1.0) / 2.0;
                (rank - t as f64).max(1.0)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn truncated_rank_matches_oracle_and_is_rank_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(0u64..6, 5), 2..15),
            t in 0usize..2,
        ) {
            let tab = table(rows.clone());
            let out = truncated_rank(&tab, t).unwrap();
            for j in 0..5 {
                let col: Vec<u64> = rows.iter().map(|r| r[j]).collect();
                prop_assert_eq!(out.column(j), rank_oracle(&col, t));
            }
            // strictly monotone transform of abundances leaves scores unchanged
            let squashed: Vec<Vec<u64>> = rows.iter().map(|r| r.iter().map(|&k| k * k * 3 + 1).collect()).collect();
            prop_assert_eq!(truncated_rank(&table(squashed), t).unwrap().values, out.values);
        }

        #[test]
        fn presence_monotone_in_tau(rows in proptest::collection::vec(proptest::collection::vec(0u64..10, 4), 3), tau in 1u64..8) {
            let tab = table(rows);
            let lo = presence_absence(&tab, tau).unwrap();
            let hi = presence_absence(&tab, tau + 1).unwrap();
            prop_assert!(lo.values.iter().zip(&hi.values).all(|(a, b)| a >= b));
        }

        #[test]
        fn size_factors_scale_equivariant(seed in any::<u64>(), col in 0usize..6, f in 2u64..9) {
            let mut r = rng::stream(seed, 0);
            let rows: Vec<Vec<u64>> = (0..20).map(|_| (0..6).map(|_| r.random_range(1..300u64)).collect()).collect();
            let base = median_of_ratios(&table(rows.clone()), false).unwrap();
            let scaled_rows: Vec<Vec<u64>> = rows.iter().map(|row| row.iter().enumerate().map(|(j, &k)| if j == col { k * f } else { k }).collect()).collect();
            let scaled = median_of_ratios(&table(scaled_rows), false).unwrap();
            let other = (col + 1) % 6;
            let ratio = (scaled[col] / scaled[other]) / (base[col] / base[other]);
            prop_assert!((ratio - f as f64).abs() < 1e-9 * f as f64);
        }
    }
}
