//! Permutation inference on distance matrices.
//!
//! Every test draws permutation `r` from its own stream `rng::stream(seed, r)`
//! so the p-value is independent of thread count. Permutations act on
//! specimen positions, never on label values, which makes the results
//! invariant to renaming groups.

use std::collections::BTreeMap;

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genmodel::{simulate, SimScenario};
use crate::ordination::{distance, DistanceMatrix, Metric};
use crate::rng;
use crate::transforms::scale_by_size_factors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermScheme {
    Free,
    WithinBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermTestKind {
    Permanova,
    MstPureEdges,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermFlag {
    /// Equal distances made the minimum spanning tree non-unique; the
    /// lexicographically first tree was used.
    TiedDistances,
    /// All distances are zero, the statistic is undefined and p = 1.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestResult {
    pub test: PermTestKind,
    pub statistic_observed: f64,
    /// (1 + #{permuted ≥ observed}) / (n_perm + 1).
    pub p_value: f64,
    pub n_perm: usize,
    pub scheme: PermScheme,
    pub seed: u64,
    pub flags: Vec<PermFlag>,
}

impl PermTestResult {
    pub fn to_csv(&self) -> String {
        let test = match self.test {
            PermTestKind::Permanova => "permanova",
            PermTestKind::MstPureEdges => "mst",
        };
        let scheme = match self.scheme {
            PermScheme::Free => "free",
            PermScheme::WithinBlock => "within_block",
        };
        format!(
            "test,statistic,p_value,n_perm,scheme,seed\n{test},{:?},{:?},{},{scheme},{}\n",
            self.statistic_observed, self.p_value, self.n_perm, self.seed
        )
    }
}

/// Group labels as codes 0..a in sorted label order.
fn encode(labels: &[String]) -> (Vec<usize>, usize) {
    let mut levels: BTreeMap<&str, usize> = labels.iter().map(|l| (l.as_str(), 0)).collect();
    for (code, v) in levels.values_mut().enumerate() {
        *v = code;
    }
    let codes = labels.iter().map(|l| levels[l.as_str()]).collect();
    (codes, levels.len())
}

/// Position sets whose members may exchange labels.
fn exchange_sets(n: usize, groups: &[usize], blocks: Option<&[String]>) -> Result<Vec<Vec<usize>>> {
    let Some(blocks) = blocks else {
        return Ok(vec![(0..n).collect()]);
    };
    if blocks.len() != n {
        return Err(Error::data(format!("{} block labels for {n} specimens", blocks.len())));
    }
    let mut sets: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, b) in blocks.iter().enumerate() {
        sets.entry(b.as_str()).or_default().push(j);
    }
    let mixed = sets.values().any(|s| s.iter().any(|&j| groups[j] != groups[s[0]]));
    if !mixed {
        return Err(Error::data(
            "blocks are incompatible with groups: no block contains more than one group, so within-block permutation cannot move labels",
        ));
    }
    Ok(sets.into_values().collect())
}

/// Applies a random within-set permutation to `labels`.
fn permute(labels: &[usize], sets: &[Vec<usize>], rng: &mut rng::StatRng, out: &mut [usize]) {
    for set in sets {
        let mut src = set.clone();
        src.shuffle(rng);
        for (&dst, &s) in set.iter().zip(&src) {
            out[dst] = labels[s];
        }
    }
}

fn p_value(observed: f64, permuted: impl ParallelIterator<Item = f64>, n_perm: usize) -> f64 {
    // Relative tolerance absorbs summation-order noise in tied statistics.
    let bar = if observed.is_finite() { observed - 1e-9 * observed.abs().max(1e-300) } else { observed };
    let hits = permuted.filter(|&s| s >= bar).count();
    (1 + hits) as f64 / (n_perm + 1) as f64
}

struct Permanova {
    n: usize,
    a: usize,
    /// (i, j, d²) for i < j.
    pairs: Vec<(usize, usize, f64)>,
    ss_total: f64,
}

impl Permanova {
    fn new(d: &DistanceMatrix, a: usize) -> Self {
        let n = d.n();
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d2 = d.get(i, j) * d.get(i, j);
                total += d2;
                pairs.push((i, j, d2));
            }
        }
        Permanova {
            n,
            a,
            pairs,
            ss_total: total / n as f64,
        }
    }

    fn pseudo_f(&self, labels: &[usize], sizes: &[usize]) -> f64 {
        let mut within = vec![0.0; self.a];
        for &(i, j, d2) in &self.pairs {
            if labels[i] == labels[j] {
                within[labels[i]] += d2;
            }
        }
        let ss_w: f64 = within.iter().zip(sizes).map(|(w, &s)| w / s as f64).sum();
        let ss_a = self.ss_total - ss_w;
        let num = ss_a / (self.a - 1) as f64;
        let den = ss_w / (self.n - self.a) as f64;
        if den <= 0.0 {
            f64::INFINITY
        } else {
            num / den
        }
    }
}

/// One-factor PERMANOVA pseudo-F with a label-permutation p-value. With
/// `blocks`, labels are only exchanged among specimens sharing a block.
pub fn permanova(d: &DistanceMatrix, groups: &[String], n_perm: usize, seed: u64, blocks: Option<&[String]>) -> Result<PermTestResult> {
    let n = d.n();
    if groups.len() != n {
        return Err(Error::data(format!("{} group labels for {n} specimens", groups.len())));
    }
    let (codes, a) = encode(groups);
    if a < 2 {
        return Err(Error::precondition("PERMANOVA needs at least 2 groups"));
    }
    let mut sizes = vec![0usize; a];
    codes.iter().for_each(|&c| sizes[c] += 1);
    if let Some(g) = sizes.iter().position(|&s| s < 2) {
        let name = &groups[codes.iter().position(|&c| c == g).unwrap_or(0)];
        return Err(Error::data(format!("group '{name}' has a single specimen")));
    }
    let sets = exchange_sets(n, &codes, blocks)?;
    let scheme = if blocks.is_some() { PermScheme::WithinBlock } else { PermScheme::Free };
    let engine = Permanova::new(d, a);
    if engine.ss_total == 0.0 {
        return Ok(PermTestResult {
            test: PermTestKind::Permanova,
            statistic_observed: f64::NAN,
            p_value: 1.0,
            n_perm,
            scheme,
            seed,
            flags: vec![PermFlag::Degenerate],
        });
    }
    let observed = engine.pseudo_f(&codes, &sizes);
    let permuted = (0..n_perm).into_par_iter().map_init(
        || vec![0usize; n],
        |buf, r| {
            permute(&codes, &sets, &mut rng::stream(seed, r as u64), buf);
            engine.pseudo_f(buf, &sizes)
        },
    );
    Ok(PermTestResult {
        test: PermTestKind::Permanova,
        statistic_observed: observed,
        p_value: p_value(observed, permuted, n_perm),
        n_perm,
        scheme,
        seed,
        flags: Vec::new(),
    })
}

/// Minimum spanning tree by Kruskal over edges ordered by (d, i, j).
/// Returns the edges and whether a tie made the tree non-unique.
pub fn minimum_spanning_tree(d: &DistanceMatrix) -> (Vec<(usize, usize)>, bool) {
    let n = d.n();
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((d.get(i, j), i, j));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut uf = UnionFind::<usize>::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    let mut tied = false;
    let mut start = 0;
    while start < edges.len() && tree.len() + 1 < n {
        let mut end = start;
        while end < edges.len() && edges[end].0 == edges[start].0 {
            end += 1;
        }
        // Within one weight class the tree is unique iff every edge joining
        // two components at the start of the class gets used.
        let candidates = edges[start..end].iter().filter(|e| !uf.equiv(e.1, e.2)).count();
        let mut added = 0;
        for &(_, i, j) in &edges[start..end] {
            if uf.union(i, j) {
                tree.push((i, j));
                added += 1;
            }
        }
        tied |= candidates > added;
        start = end;
    }
    (tree, tied)
}

/// Number of minimum-spanning-tree edges joining specimens of the same group,
/// against its label-permutation distribution.
pub fn mst_pure_edge_test(d: &DistanceMatrix, groups: &[String], n_perm: usize, seed: u64) -> Result<PermTestResult> {
    let n = d.n();
    if groups.len() != n {
        return Err(Error::data(format!("{} group labels for {n} specimens", groups.len())));
    }
    let (codes, a) = encode(groups);
    if a < 2 {
        return Err(Error::precondition("the spanning-tree test needs at least 2 groups"));
    }
    let (tree, tied) = minimum_spanning_tree(d);
    let pure = |labels: &[usize]| tree.iter().filter(|&&(i, j)| labels[i] == labels[j]).count() as f64;
    let observed = pure(&codes);
    let sets = vec![(0..n).collect::<Vec<_>>()];
    let permuted = (0..n_perm).into_par_iter().map_init(
        || vec![0usize; n],
        |buf, r| {
            permute(&codes, &sets, &mut rng::stream(seed, r as u64), buf);
            pure(buf)
        },
    );
    Ok(PermTestResult {
        test: PermTestKind::MstPureEdges,
        statistic_observed: observed,
        p_value: p_value(observed, permuted, n_perm),
        n_perm,
        scheme: PermScheme::Free,
        seed,
        flags: if tied { vec![PermFlag::TiedDistances] } else { Vec::new() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdNetwork {
    pub ids: Vec<String>,
    pub max_d: f64,
    /// (j, k, d_jk) with j < k, in row-major order.
    pub edges: Vec<(usize, usize, f64)>,
    /// Component index per specimen, numbered by first member.
    pub component: Vec<usize>,
    pub n_components: usize,
}

impl ThresholdNetwork {
    pub fn edges_csv(&self) -> String {
        let mut out = String::from("from,to,distance\n");
        for &(j, k, d) in &self.edges {
            out.push_str(&format!("{},{},{d:?}\n", self.ids[j], self.ids[k]));
        }
        out
    }

    pub fn components_csv(&self) -> String {
        let mut out = String::from("specimen_id,component\n");
        for (id, c) in self.ids.iter().zip(&self.component) {
            out.push_str(&format!("{id},{}\n", c + 1));
        }
        out
    }
}

/// Graph linking specimens at distance ≤ `max_d`.
pub fn threshold_network(d: &DistanceMatrix, max_d: f64) -> Result<ThresholdNetwork> {
    if !(max_d > 0.0 && max_d <= 1.0) {
        return Err(Error::precondition(format!("threshold must lie in (0, 1], got {max_d}")));
    }
    let n = d.n();
    let mut uf = UnionFind::<usize>::new(n);
    let mut edges = Vec::new();
    for j in 0..n {
        for k in (j + 1)..n {
            if d.get(j, k) <= max_d {
                edges.push((j, k, d.get(j, k)));
                uf.union(j, k);
            }
        }
    }
    let mut number: BTreeMap<usize, usize> = BTreeMap::new();
    let component: Vec<usize> = (0..n)
        .map(|j| {
            let next = number.len();
            *number.entry(uf.find(j)).or_insert(next)
        })
        .collect();
    Ok(ThresholdNetwork {
        ids: d.ids.clone(),
        max_d,
        edges,
        component,
        n_components: number.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub scenario: String,
    /// Switched fraction of each group at every grid point.
    pub grid: Vec<f64>,
    pub power: Vec<f64>,
    /// Binomial Monte Carlo standard error of each power estimate.
    pub se: Vec<f64>,
    pub n_replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerComparison {
    pub alpha: f64,
    pub n_perm: usize,
    pub without_switching: PowerCurve,
    pub with_switching: PowerCurve,
}

impl PowerComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("switch_fraction,power_without,se_without,power_with,se_with\n");
        let (a, b) = (&self.without_switching, &self.with_switching);
        for i in 0..a.grid.len() {
            out.push_str(&format!("{:?},{:?},{:?},{:?},{:?}\n", a.grid[i], a.power[i], a.se[i], b.power[i], b.se[i]));
        }
        out
    }
}

/// Bray-Curtis PERMANOVA p-value for the biological specimens of a simulated
/// dataset, on counts divided by the true size factors.
fn simulated_p(scenario: &SimScenario, n_perm: usize, perm_seed: u64) -> Result<f64> {
    let data = simulate(scenario)?;
    let bio = data.biological_indices()?;
    let data = data.select_specimens(&bio)?;
    let d = data
        .size_factors
        .clone()
        .ok_or_else(|| Error::data("simulated dataset lacks size factors"))?;
    let scaled = scale_by_size_factors(&data.counts, &d)?;
    let dm = distance(&scaled, Metric::BrayCurtis)?;
    let groups = data.column_values("group")?;
    Ok(permanova(&dm, &groups, n_perm, perm_seed, None)?.p_value)
}

/// PERMANOVA power with and without strain switching. Replicate r uses the
/// same simulation seed in both arms and at every grid point, so the arms
/// differ only in which specimens report the switched taxa.
pub fn strain_switch_power(
    base: &SimScenario,
    switch_fractions: &[f64],
    n_replicates: usize,
    alpha: f64,
    n_perm: usize,
    seed: u64,
) -> Result<PowerComparison> {
    if base.switch_pairs.is_empty() {
        return Err(Error::precondition("scenario defines no switch pairs"));
    }
    if base.groups.len() < 2 {
        return Err(Error::precondition("scenario needs at least 2 groups"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::precondition(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if n_replicates == 0 || switch_fractions.is_empty() {
        return Err(Error::precondition("power needs at least one replicate and one grid point"));
    }
    if let Some(f) = switch_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::precondition(format!("switch fraction {f} is outside [0, 1]")));
    }
    let arm = |fraction: Option<f64>| -> Result<PowerCurve> {
        let rejections: Vec<usize> = (0..n_replicates)
            .into_par_iter()
            .map(|r| {
                let rep_seed = rng::mix(seed, r as u64);
                let mut s = base.clone();
                s.seed = rep_seed;
                let perm_seed = rng::mix(rep_seed, 1);
                match fraction {
                    None => {
                        s.switch_pairs.clear();
                        Ok(vec![usize::from(simulated_p(&s, n_perm, perm_seed)? <= alpha); switch_fractions.len()])
                    }
                    Some(_) => switch_fractions
                        .iter()
                        .map(|&f| {
                            s.switch_fraction = Some(f);
                            Ok(usize::from(simulated_p(&s, n_perm, perm_seed)? <= alpha))
                        })
                        .collect(),
                }
            })
            .collect::<Result<Vec<Vec<usize>>>>()?
            .into_iter()
            .fold(vec![0; switch_fractions.len()], |mut acc, row| {
                acc.iter_mut().zip(&row).for_each(|(a, x)| *a += x);
                acc
            });
        let power: Vec<f64> = rejections.iter().map(|&c| c as f64 / n_replicates as f64).collect();
        let se = power.iter().map(|p| (p * (1.0 - p) / n_replicates as f64).sqrt()).collect();
        let label = if fraction.is_some() { "with switching" } else { "without switching" };
        Ok(PowerCurve {
            scenario: format!(
                "{label}: {} groups, {} taxa, {} switch pairs",
                base.groups.len(),
                base.taxa.len(),
                base.switch_pairs.len()
            ),
            grid: switch_fractions.to_vec(),
            power,
            se,
            n_replicates,
        })
    };
    Ok(PowerComparison {
        alpha,
        n_perm,
        without_switching: arm(None)?,
        with_switching: arm(Some(0.0))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(n: usize, values: Vec<f64>) -> DistanceMatrix {
        DistanceMatrix::new((0..n).map(|i| format!("s{i}")).collect(), values, "test").unwrap()
    }

    #[test]
    fn mst_flags_ties_only_when_ambiguous() {
        // Equilateral triangle: any two edges form a spanning tree.
        let tri = dm(3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let (tree, tied) = minimum_spanning_tree(&tri);
        assert_eq!(tree, vec![(0, 1), (0, 2)]);
        assert!(tied);
        // Equal weights that are all needed are not ambiguous.
        let path = dm(3, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
        let (tree, tied) = minimum_spanning_tree(&path);
        assert_eq!(tree, vec![(0, 1), (1, 2)]);
        assert!(!tied);
    }

    #[test]
    fn blocks_without_mixing_are_rejected() {
        let g: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let b: Vec<String> = ["x", "x", "y", "y"].iter().map(|s| s.to_string()).collect();
        assert!(exchange_sets(4, &encode(&g).0, Some(&b)).is_err());
        assert!(exchange_sets(4, &encode(&g).0, Some(&b[..3])).is_err());
    }
}
