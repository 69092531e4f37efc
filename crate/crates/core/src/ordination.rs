//! Distance matrices, principal coordinates, PCA and correspondence analysis.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountTable;
use crate::error::{Error, Result};
use crate::linalg::{svd, symmetric_eigen};
use crate::transforms::TransformedTable;
use crate::tree::PhyloTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BrayCurtis,
    Jaccard,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bray" | "bray_curtis" | "bray-curtis" | "braycurtis" => Ok(Metric::BrayCurtis),
            "jaccard" => Ok(Metric::Jaccard),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::data(format!(
                "unknown metric '{other}' (expected bray, jaccard, euclidean, unifrac, wunifrac)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifracVariant {
    Unweighted,
    /// Σ l_b |p_A(b) − p_B(b)|.
    Weighted,
    /// Weighted, divided by Σ l_b (p_A(b) + p_B(b)).
    WeightedNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFlag {
    /// Non-binary input thresholded at 1 before Jaccard.
    AutoBinarized,
    /// Some pair had no mass in either specimen; its distance is set to 0.
    EmptyPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    /// Row-major N×N.
    pub values: Vec<f64>,
    pub metric: String,
    pub flags: Vec<DistanceFlag>,
}

impl DistanceMatrix {
    /// Builds from a full matrix, checking symmetry, zero diagonal and
    /// non-negativity.
    pub fn new(ids: Vec<String>, values: Vec<f64>, metric: impl Into<String>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(Error::data(format!("distance matrix needs {} entries, got {}", n * n, values.len())));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::data(format!("distance of '{}' to itself is not 0", ids[i])));
            }
            for j in 0..i {
                let (a, b) = (values[i * n + j], values[j * n + i]);
                if !(a.is_finite() && a >= 0.0) || (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                    return Err(Error::data(format!(
                        "distance between '{}' and '{}' is negative, non-finite or asymmetric",
                        ids[i], ids[j]
                    )));
                }
            }
        }
        Ok(DistanceMatrix {
            ids,
            values,
            metric: metric.into(),
            flags: Vec::new(),
        })
    }

    fn from_pairs(ids: Vec<String>, metric: &str, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let n = ids.len();
        let upper: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| ((i + 1)..n).map(|j| f(i, j)).collect()).collect();
        let mut values = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                let j = i + 1 + off;
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        DistanceMatrix {
            ids,
            values,
            metric: metric.to_string(),
            flags: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Sub-matrix for the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> DistanceMatrix {
        let values = idx.iter().flat_map(|&i| idx.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        DistanceMatrix {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            values,
            metric: self.metric.clone(),
            flags: self.flags.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.n() {
                let _ = write!(out, ",{:?}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise distances between specimens (columns).
pub fn distance(table: &TransformedTable, metric: Metric) -> Result<DistanceMatrix> {
    let n = table.n_specimens();
    if n < 2 {
        return Err(Error::precondition("distances need at least 2 specimens"));
    }
    if table.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("table contains non-finite values"));
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| table.column(j)).collect();
    let mut flags = Vec::new();
    let tag = match metric {
        Metric::BrayCurtis => "bray_curtis",
        Metric::Jaccard => "jaccard",
        Metric::Euclidean => "euclidean",
    };
    if metric == Metric::BrayCurtis && table.values.iter().any(|&v| v < 0.0) {
        return Err(Error::data("Bray-Curtis needs non-negative values"));
    }
    if metric == Metric::Jaccard && table.values.iter().any(|&v| v != 0.0 && v != 1.0) {
        flags.push(DistanceFlag::AutoBinarized);
        for c in cols.iter_mut() {
            c.iter_mut().for_each(|v| *v = if *v >= 1.0 { 1.0 } else { 0.0 });
        }
    }
    let pair = |a: &[f64], b: &[f64]| -> f64 {
        match metric {
            Metric::BrayCurtis => {
                let (mut num, mut den) = (0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    num += (x - y).abs();
                    den += x + y;
                }
                if den == 0.0 {
                    0.0
                } else {
                    num / den
                }
            }
            Metric::Jaccard => {
                let (mut inter, mut union) = (0usize, 0usize);
                for (x, y) in a.iter().zip(b) {
                    let (p, q) = (*x > 0.0, *y > 0.0);
                    inter += usize::from(p && q);
                    union += usize::from(p || q);
                }
                if union == 0 {
                    0.0
                } else {
                    1.0 - inter as f64 / union as f64
                }
            }
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    };
    let mut dm = DistanceMatrix::from_pairs(table.specimen_ids.clone(), tag, |i, j| pair(&cols[i], &cols[j]));
    // A pair is empty exactly when both columns are all zero.
    let zero_columns = cols.iter().filter(|c| c.iter().all(|&v| v == 0.0)).count();
    if metric != Metric::Euclidean && zero_columns >= 2 {
        flags.push(DistanceFlag::EmptyPair);
    }
    dm.flags = flags;
    Ok(dm)
}

/// UniFrac distances over the tree's branches; the root has no branch.
pub fn unifrac(counts: &CountTable, tree: &PhyloTree, variant: UnifracVariant) -> Result<DistanceMatrix> {
    let n = counts.n_specimens();
    if n < 2 {
        return Err(Error::precondition("distances need at least 2 specimens"));
    }
    let leaf = tree.leaf_index();
    let mut taxon_leaf = Vec::with_capacity(counts.n_taxa());
    for (i, id) in counts.taxa_ids().iter().enumerate() {
        match leaf.get(id.as_str()) {
            Some(&node) => taxon_leaf.push(Some(node)),
            None if counts.row(i).iter().all(|&k| k == 0) => taxon_leaf.push(None),
            None => {
                return Err(Error::data(format!(
                    "taxon '{id}' is not a leaf of the tree; prune the table or tree at ingest"
                )))
            }
        }
    }
    let totals: Vec<f64> = (0..n).map(|j| counts.column(j).iter().sum::<u64>() as f64).collect();
    if let Some(j) = totals.iter().position(|&t| t == 0.0) {
        return Err(Error::data(format!("specimen '{}' has no reads", counts.specimen_ids()[j])));
    }
    // mass[node * n + j]: proportion of specimen j's reads below node.
    let nodes = tree.len();
    let mut mass = vec![0.0; nodes * n];
    for (i, node) in taxon_leaf.iter().enumerate() {
        if let Some(node) = node {
            for j in 0..n {
                mass[node * n + j] += counts.get(i, j) as f64 / totals[j];
            }
        }
    }
    for v in tree.postorder() {
        if let Some(p) = tree.node(v).parent {
            for j in 0..n {
                mass[p * n + j] += mass[v * n + j];
            }
        }
    }
    let root = tree.root();
    let edges: Vec<(usize, f64)> = (0..nodes)
        .filter(|&v| v != root)
        .map(|v| (v, tree.node(v).branch_length))
        .filter(|&(_, l)| l > 0.0)
        .collect();
    let tag = match variant {
        UnifracVariant::Unweighted => "unifrac",
        UnifracVariant::Weighted => "weighted_unifrac",
        UnifracVariant::WeightedNormalized => "weighted_unifrac_normalized",
    };
    let pair = |a: usize, b: usize| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for &(v, l) in &edges {
            let (pa, pb) = (mass[v * n + a], mass[v * n + b]);
            match variant {
                UnifracVariant::Unweighted => {
                    let (ia, ib) = (pa > 0.0, pb > 0.0);
                    if ia != ib {
                        num += l;
                    }
                    if ia || ib {
                        den += l;
                    }
                }
                UnifracVariant::Weighted | UnifracVariant::WeightedNormalized => {
                    num += l * (pa - pb).abs();
                    den += l * (pa + pb);
                }
            }
        }
        match variant {
            UnifracVariant::Weighted => num,
            _ if den == 0.0 => 0.0,
            _ => num / den,
        }
    };
    Ok(DistanceMatrix::from_pairs(counts.specimen_ids().to_vec(), tag, pair))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinationMethod {
    Pcoa,
    Pca,
    Ca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinationFlag {
    /// Fewer positive axes exist than requested.
    AxesTruncated,
}

/// Row scores for a second set of objects (taxa for PCA and CA).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loadings {
    pub ids: Vec<String>,
    /// Row-major ids.len() × axes.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordination {
    pub method: OrdinationMethod,
    pub ids: Vec<String>,
    pub axes: usize,
    /// Row-major ids.len() × axes.
    pub coordinates: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub variance_explained: Vec<f64>,
    pub negative_eigenvalue_mass: f64,
    pub loadings: Option<Loadings>,
    /// Correspondence analysis: Σ σ² over all axes.
    pub total_inertia: Option<f64>,
    pub flags: Vec<OrdinationFlag>,
}

impl Ordination {
    pub fn coordinate(&self, row: usize, axis: usize) -> f64 {
        self.coordinates[row * self.axes + axis]
    }

    fn header(&self, first: &str) -> String {
        let mut h = first.to_string();
        for a in 0..self.axes {
            let _ = write!(h, ",Axis{}", a + 1);
        }
        h.push('\n');
        h
    }

    /// Specimen coordinates as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = self.header("id");
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for a in 0..self.axes {
                let _ = write!(out, ",{:?}", self.coordinate(i, a));
            }
            out.push('\n');
        }
        out
    }

    /// Per-axis eigenvalue and share of variance.
    pub fn axes_csv(&self) -> String {
        let mut out = String::from("axis,eigenvalue,variance_explained\n");
        for a in 0..self.axes {
            let _ = writeln!(out, "Axis{},{:?},{:?}", a + 1, self.eigenvalues[a], self.variance_explained[a]);
        }
        out
    }

    pub fn loadings_csv(&self) -> Option<String> {
        let l = self.loadings.as_ref()?;
        let mut out = self.header("id");
        for (i, id) in l.ids.iter().enumerate() {
            out.push_str(id);
            for a in 0..self.axes {
                let _ = write!(out, ",{:?}", l.values[i * self.axes + a]);
            }
            out.push('\n');
        }
        Some(out)
    }
}

fn relative_tol(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-10 * scale.max(f64::MIN_POSITIVE)
}

/// Classical scaling of a distance matrix.
pub fn pcoa(d: &DistanceMatrix, k: usize) -> Result<Ordination> {
    let n = d.n();
    if n < 3 {
        return Err(Error::precondition("PCoA needs at least 3 specimens"));
    }
    let d2 = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand));
    let (vals, vecs) = symmetric_eigen(b)?;
    let tol = relative_tol(&vals);
    let positive: Vec<usize> = (0..n).filter(|&a| vals[a] > tol).collect();
    let negative_eigenvalue_mass = vals.iter().filter(|&&v| v < -tol).map(|v| -v).sum();
    let total_positive: f64 = positive.iter().map(|&a| vals[a]).sum();
    let mut flags = Vec::new();
    let axes = if k > positive.len() {
        flags.push(OrdinationFlag::AxesTruncated);
        positive.len()
    } else {
        k
    };
    let mut coordinates = vec![0.0; n * axes];
    for a in 0..axes {
        let s = vals[a].sqrt();
        for i in 0..n {
            coordinates[i * axes + a] = vecs[(i, a)] * s;
        }
    }
    Ok(Ordination {
        method: OrdinationMethod::Pcoa,
        ids: d.ids.clone(),
        axes,
        coordinates,
        eigenvalues: vals[..axes].to_vec(),
        variance_explained: vals[..axes].iter().map(|v| v / total_positive).collect(),
        negative_eigenvalue_mass,
        loadings: None,
        total_inertia: None,
        flags,
    })
}

/// PCA with specimens as observations: each taxon centered across
/// specimens; scores U Σ, loadings V; eigenvalues σ²/(N − 1).
pub fn pca(table: &TransformedTable, k: usize) -> Result<Ordination> {
    let (m, n) = (table.n_taxa(), table.n_specimens());
    if n < 2 || m < 2 {
        return Err(Error::precondition("PCA needs at least 2 specimens and 2 taxa"));
    }
    let mut x = DMatrix::from_fn(n, m, |j, i| table.get(i, j));
    for i in 0..m {
        let mean = x.column(i).mean();
        x.column_mut(i).add_scalar_mut(-mean);
    }
    let (u, s, v) = svd(x)?;
    let ss: Vec<f64> = s.iter().map(|x| x * x).collect();
    let total: f64 = ss.iter().sum();
    if !(total > 0.0) {
        return Err(Error::data("PCA input has zero variance"));
    }
    let tol = relative_tol(&s);
    let rank = s.iter().filter(|&&x| x > tol).count();
    let mut flags = Vec::new();
    let axes = if k > rank {
        flags.push(OrdinationFlag::AxesTruncated);
        rank
    } else {
        k
    };
    let mut coordinates = vec![0.0; n * axes];
    let mut loadings = vec![0.0; m * axes];
    for a in 0..axes {
        for j in 0..n {
            coordinates[j * axes + a] = u[(j, a)] * s[a];
        }
        for i in 0..m {
            loadings[i * axes + a] = v[(i, a)];
        }
    }
    Ok(Ordination {
        method: OrdinationMethod::Pca,
        ids: table.specimen_ids.clone(),
        axes,
        coordinates,
        eigenvalues: ss[..axes].iter().map(|v| v / (n - 1) as f64).collect(),
        variance_explained: ss[..axes].iter().map(|v| v / total).collect(),
        negative_eigenvalue_mass: 0.0,
        loadings: Some(Loadings {
            ids: table.taxa_ids.clone(),
            values: loadings,
        }),
        total_inertia: None,
        flags,
    })
}

/// Correspondence analysis of the taxa × specimens table. Coordinates are
/// specimen principal coordinates, loadings taxon principal coordinates.
pub fn correspondence_analysis(counts: &CountTable, k: usize) -> Result<Ordination> {
    let (m, n) = (counts.n_taxa(), counts.n_specimens());
    let total: f64 = counts.as_slice().iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return Err(Error::data("table has no counts"));
    }
    let r: Vec<f64> = (0..m).map(|i| counts.row(i).iter().sum::<u64>() as f64 / total).collect();
    let c: Vec<f64> = (0..n).map(|j| counts.column(j).iter().sum::<u64>() as f64 / total).collect();
    if let Some(i) = r.iter().position(|&x| x == 0.0) {
        return Err(Error::data(format!("taxon '{}' is all zero; filter it first", counts.taxa_ids()[i])));
    }
    if let Some(j) = c.iter().position(|&x| x == 0.0) {
        return Err(Error::data(format!("specimen '{}' is all zero; filter it first", counts.specimen_ids()[j])));
    }
    let s = DMatrix::from_fn(m, n, |i, j| (counts.get(i, j) as f64 / total - r[i] * c[j]) / (r[i] * c[j]).sqrt());
    let (u, sigma, v) = svd(s)?;
    let inertia: Vec<f64> = sigma.iter().map(|x| x * x).collect();
    let total_inertia: f64 = inertia.iter().sum();
    let tol = 1e-10 * sigma.first().copied().unwrap_or(0.0).max(1e-300);
    let rank = sigma.iter().filter(|&&x| x > tol && x > 1e-12).count();
    let mut flags = Vec::new();
    let axes = if k > rank {
        flags.push(OrdinationFlag::AxesTruncated);
        rank
    } else {
        k
    };
    let mut coordinates = vec![0.0; n * axes];
    let mut loadings = vec![0.0; m * axes];
    for a in 0..axes {
        for j in 0..n {
            coordinates[j * axes + a] = v[(j, a)] * sigma[a] / c[j].sqrt();
        }
        for i in 0..m {
            loadings[i * axes + a] = u[(i, a)] * sigma[a] / r[i].sqrt();
        }
    }
    Ok(Ordination {
        method: OrdinationMethod::Ca,
        ids: counts.specimen_ids().to_vec(),
        axes,
        coordinates,
        eigenvalues: inertia[..axes].to_vec(),
        variance_explained: inertia[..axes]
            .iter()
            .map(|v| if total_inertia > 0.0 { v / total_inertia } else { 0.0 })
            .collect(),
        negative_eigenvalue_mass: 0.0,
        loadings: Some(Loadings {
            ids: counts.taxa_ids().to_vec(),
            values: loadings,
        }),
        total_inertia: Some(total_inertia),
        flags,
    })
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static scatter of the first two axes, optionally colored by a label per
/// specimen, with axes annotated by their share of variance.
pub fn scatter_svg(ord: &Ordination, labels: Option<&[String]>, title: &str) -> Result<String> {
    if ord.axes == 0 {
        return Err(Error::precondition("ordination has no axes to plot"));
    }
    if let Some(l) = labels {
        if l.len() != ord.ids.len() {
            return Err(Error::data("one label per specimen is required"));
        }
    }
    let n = ord.ids.len();
    let xy: Vec<(f64, f64)> = (0..n)
        .map(|i| (ord.coordinate(i, 0), if ord.axes > 1 { ord.coordinate(i, 1) } else { 0.0 }))
        .collect();
    let span = |v: Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-12);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(xy.iter().map(|p| p.0).collect());
    let (y0, y1) = span(xy.iter().map(|p| p.1).collect());
    // Plot region keeps the aspect ratio of the axes.
    let (w, h, margin) = (600.0, 600.0, 60.0);
    let scale = ((w - 2.0 * margin) / (x1 - x0)).min((h - 2.0 * margin) / (y1 - y0));
    let px = |x: f64| margin + (x - x0) * scale;
    let py = |y: f64| h - margin - (y - y0) * scale;
    let mut levels: Vec<&str> = labels.map(|l| l.iter().map(String::as_str).collect()).unwrap_or_default();
    levels.sort_unstable();
    levels.dedup();
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, w / 2.0, escape(title));
    let pct = |a: usize| ord.variance_explained.get(a).map_or(0.0, |v| 100.0 * v);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">Axis 1 ({:.1}%)</text>"#,
        w / 2.0,
        h - 15.0,
        pct(0)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">Axis 2 ({:.1}%)</text>"#,
        h / 2.0,
        h / 2.0,
        pct(1)
    );
    if x0 < 0.0 && x1 > 0.0 {
        let _ = writeln!(out, r##"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="#cccccc"/>"##, px(0.0), margin, h - margin);
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(out, r##"<line x1="{1}" y1="{0:.2}" x2="{2}" y2="{0:.2}" stroke="#cccccc"/>"##, py(0.0), margin, w - margin);
    }
    for (i, &(x, y)) in xy.iter().enumerate() {
        let color = labels
            .map(|l| PALETTE[levels.iter().position(|v| *v == l[i]).unwrap_or(0) % PALETTE.len()])
            .unwrap_or(PALETTE[0]);
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"><title>{}</title></circle>"#,
            px(x),
            py(y),
            color,
            escape(&ord.ids[i])
        );
    }
    for (g, level) in levels.iter().enumerate() {
        let y = 50.0 + 18.0 * g as f64;
        let _ = writeln!(out, r#"<circle cx="{}" cy="{y}" r="5" fill="{}"/>"#, w - 110.0, PALETTE[g % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, w - 100.0, y + 4.0, escape(level));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
