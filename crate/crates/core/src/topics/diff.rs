//! Differential topic abundance through the negative binomial Wald test.

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::nbglm::{wald_test, WaldRow};

use super::TopicFit;

/// Topic identifiers `Topic_1` … `Topic_T`.
pub fn topic_ids(topics: usize) -> Vec<String> {
    (1..=topics).map(|t| format!("Topic_{t}")).collect()
}

/// c_tj = round(median θ_jt × S_j), ties to even; topics as rows.
pub fn topic_count_table(fit: &TopicFit, library_sizes: &[u64]) -> Result<CountTable> {
    let (n, t) = (fit.specimen_ids.len(), fit.n_topics);
    if library_sizes.len() != n {
        return Err(Error::data(format!("{} library sizes for {n} specimens", library_sizes.len())));
    }
    let median = fit.theta_median();
    let rows: Vec<Vec<u64>> = (0..t)
        .map(|k| (0..n).map(|j| (median[j * t + k] * library_sizes[j] as f64).round_ties_even() as u64).collect())
        .collect();
    CountTable::from_rows(topic_ids(t), fit.specimen_ids.clone(), rows)
}

/// Library sizes scaled to geometric mean 1.
pub fn library_size_factors(library_sizes: &[u64]) -> Result<Vec<f64>> {
    if let Some(j) = library_sizes.iter().position(|&s| s == 0) {
        return Err(Error::data(format!("specimen {} has library size 0", j + 1)));
    }
    let n = library_sizes.len() as f64;
    let gm = (library_sizes.iter().map(|&s| (s as f64).ln()).sum::<f64>() / n).exp();
    Ok(library_sizes.iter().map(|&s| s as f64 / gm).collect())
}

/// Wald tests of topic counts between two groups. Topic counts are built
/// from S_j, so S_j itself is the size factor; a median over T ratios would
/// couple every topic to the shifted one.
pub fn differential_topics<S: AsRef<str>>(fit: &TopicFit, library_sizes: &[u64], groups: &[S]) -> Result<Vec<WaldRow>> {
    let table = topic_count_table(fit, library_sizes)?;
    let d = library_size_factors(library_sizes)?;
    wald_test(&table, groups, &d)
}
