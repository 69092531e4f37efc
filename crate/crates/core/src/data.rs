//! In-memory data model: count table, specimen metadata, taxonomy and tree
//! bound into one [`Dataset`].
//!
//! Row and column order is whatever ingestion produced and is the canonical
//! order of every downstream output. Negative controls live in the same
//! count table as biological specimens and are told apart by
//! [`SpecimenType`].

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::PhyloTree;

/// Dense taxa × specimen matrix of read counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CountTableRepr", into = "CountTableRepr")]
pub struct CountTable {
    taxa_ids: Vec<String>,
    specimen_ids: Vec<String>,
    /// Row-major, `taxa_ids.len() * specimen_ids.len()` entries.
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct CountTableRepr {
    taxa_ids: Vec<String>,
    specimen_ids: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl TryFrom<CountTableRepr> for CountTable {
    type Error = Error;

    fn try_from(repr: CountTableRepr) -> Result<Self> {
        CountTable::from_rows(repr.taxa_ids, repr.specimen_ids, repr.counts)
    }
}

impl From<CountTable> for CountTableRepr {
    fn from(table: CountTable) -> Self {
        let counts = (0..table.n_taxa()).map(|i| table.row(i).to_vec()).collect();
        CountTableRepr {
            taxa_ids: table.taxa_ids,
            specimen_ids: table.specimen_ids,
            counts,
        }
    }
}

fn first_duplicate(ids: &[String]) -> Option<&str> {
    let mut seen = HashSet::with_capacity(ids.len());
    ids.iter().find(|id| !seen.insert(id.as_str())).map(String::as_str)
}

impl CountTable {
    /// Builds a table from row-major counts, enforcing every invariant.
    pub fn new(taxa_ids: Vec<String>, specimen_ids: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if taxa_ids.is_empty() || specimen_ids.is_empty() {
            return Err(Error::data("count table needs at least one taxon and one specimen"));
        }
        if counts.len() != taxa_ids.len() * specimen_ids.len() {
            return Err(Error::data(format!(
                "count table has {} cells, expected {} x {}",
                counts.len(),
                taxa_ids.len(),
                specimen_ids.len()
            )));
        }
        if let Some(dup) = first_duplicate(&taxa_ids) {
            return Err(Error::data(format!("duplicate taxon identifier '{dup}'")));
        }
        if let Some(dup) = first_duplicate(&specimen_ids) {
            return Err(Error::data(format!("duplicate specimen identifier '{dup}'")));
        }
        Ok(CountTable {
            taxa_ids,
            specimen_ids,
            counts,
        })
    }

    pub fn from_rows(taxa_ids: Vec<String>, specimen_ids: Vec<String>, rows: Vec<Vec<u64>>) -> Result<Self> {
        if rows.len() != taxa_ids.len() {
            return Err(Error::data(format!(
                "count table has {} rows but {} taxon identifiers",
                rows.len(),
                taxa_ids.len()
            )));
        }
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != specimen_ids.len()) {
            return Err(Error::data(format!(
                "row '{}' has {} counts, expected {}",
                taxa_ids[i],
                row.len(),
                specimen_ids.len()
            )));
        }
        let counts = rows.into_iter().flatten().collect();
        CountTable::new(taxa_ids, specimen_ids, counts)
    }

    pub fn n_taxa(&self) -> usize {
        self.taxa_ids.len()
    }

    pub fn n_specimens(&self) -> usize {
        self.specimen_ids.len()
    }

    pub fn taxa_ids(&self) -> &[String] {
        &self.taxa_ids
    }

    pub fn specimen_ids(&self) -> &[String] {
        &self.specimen_ids
    }

    #[inline]
    pub fn get(&self, taxon: usize, specimen: usize) -> u64 {
        self.counts[taxon * self.specimen_ids.len() + specimen]
    }

    pub fn row(&self, taxon: usize) -> &[u64] {
        let n = self.specimen_ids.len();
        &self.counts[taxon * n..(taxon + 1) * n]
    }

    pub fn column(&self, specimen: usize) -> Vec<u64> {
        (0..self.n_taxa()).map(|i| self.get(i, specimen)).collect()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn taxon_index(&self, id: &str) -> Option<usize> {
        self.taxa_ids.iter().position(|t| t == id)
    }

    pub fn specimen_index(&self, id: &str) -> Option<usize> {
        self.specimen_ids.iter().position(|s| s == id)
    }

    /// Sub-table keeping the given rows and columns, in the order given.
    pub fn select(&self, taxa: &[usize], specimens: &[usize]) -> Result<CountTable> {
        let mut counts = Vec::with_capacity(taxa.len() * specimens.len());
        for &i in taxa {
            for &j in specimens {
                counts.push(self.get(i, j));
            }
        }
        CountTable::new(
            taxa.iter().map(|&i| self.taxa_ids[i].clone()).collect(),
            specimens.iter().map(|&j| self.specimen_ids[j].clone()).collect(),
            counts,
        )
    }

    /// Same identifiers, new values.
    pub fn with_counts(&self, counts: Vec<u64>) -> Result<CountTable> {
        CountTable::new(self.taxa_ids.clone(), self.specimen_ids.clone(), counts)
    }
}

/// Per-column read totals S_j, in specimen order.
///
/// Fails when a specimen has no reads at all.
pub fn library_sizes(counts: &CountTable) -> Result<Vec<u64>> {
    let n = counts.n_specimens();
    let mut sums = vec![0u64; n];
    for i in 0..counts.n_taxa() {
        for (s, &k) in sums.iter_mut().zip(counts.row(i)) {
            *s += k;
        }
    }
    if let Some(j) = sums.iter().position(|&s| s == 0) {
        return Err(Error::data(format!(
            "specimen '{}' has no reads",
            counts.specimen_ids()[j]
        )));
    }
    Ok(sums)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecimenType {
    Biological,
    NegativeControl,
}

impl std::str::FromStr for SpecimenType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "biological" | "sample" | "specimen" => Ok(SpecimenType::Biological),
            "negative_control" | "control" | "negative" | "blank" => Ok(SpecimenType::NegativeControl),
            other => Err(Error::data(format!("unknown specimen_type '{other}'"))),
        }
    }
}

/// One row of the specimen information table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub specimen_id: String,
    pub subject_id: String,
    pub specimen_type: SpecimenType,
    #[serde(default)]
    pub batch: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    /// Any further columns of the metadata file, kept verbatim.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl SampleMetadata {
    pub fn biological(specimen_id: impl Into<String>) -> Self {
        let id = specimen_id.into();
        SampleMetadata {
            subject_id: id.clone(),
            specimen_id: id,
            specimen_type: SpecimenType::Biological,
            batch: 0,
            group: None,
            pair_id: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn negative_control(specimen_id: impl Into<String>) -> Self {
        SampleMetadata {
            specimen_type: SpecimenType::NegativeControl,
            ..SampleMetadata::biological(specimen_id)
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    /// Value of a named column; `None` when the column is absent or empty.
    pub fn field(&self, column: &str) -> Option<String> {
        match column {
            "specimen_id" => Some(self.specimen_id.clone()),
            "subject_id" => Some(self.subject_id.clone()),
            "specimen_type" => Some(
                match self.specimen_type {
                    SpecimenType::Biological => "biological",
                    SpecimenType::NegativeControl => "negative_control",
                }
                .to_string(),
            ),
            "batch" => Some(self.batch.to_string()),
            "group" => self.group.clone(),
            "pair_id" => self.pair_id.clone(),
            other => self.extra.get(other).cloned(),
        }
    }
}

/// Taxonomic assignments, one optional name per rank (e.g. Kingdom..Genus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyTable {
    pub rank_names: Vec<String>,
    pub rows: Vec<TaxonomyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRow {
    pub taxon_id: String,
    pub ranks: Vec<Option<String>>,
}

impl TaxonomyTable {
    pub fn rank_index(&self, rank: &str) -> Option<usize> {
        self.rank_names.iter().position(|r| r.eq_ignore_ascii_case(rank))
    }

    pub fn lookup(&self, taxon_id: &str) -> Option<&TaxonomyRow> {
        self.rows.iter().find(|r| r.taxon_id == taxon_id)
    }
}

/// Count table plus everything known about its rows and columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub counts: CountTable,
    pub samples: Vec<SampleMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<TaxonomyTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<PhyloTree>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_factors: Option<Vec<f64>>,
}

/// A broken invariant, naming the identifier and the rule it violates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub id: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.id, self.message)
    }
}

impl Dataset {
    pub fn new(counts: CountTable, samples: Vec<SampleMetadata>) -> Self {
        Dataset {
            counts,
            samples,
            taxonomy: None,
            tree: None,
            size_factors: None,
        }
    }

    /// Metadata rows in count-table column order.
    pub fn samples_in_order(&self) -> Result<Vec<&SampleMetadata>> {
        let by_id: HashMap<&str, &SampleMetadata> =
            self.samples.iter().map(|s| (s.specimen_id.as_str(), s)).collect();
        self.counts
            .specimen_ids()
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::data(format!("specimen '{id}' has no metadata row")))
            })
            .collect()
    }

    fn indices_of(&self, kind: SpecimenType) -> Result<Vec<usize>> {
        Ok(self
            .samples_in_order()?
            .iter()
            .enumerate()
            .filter(|(_, s)| s.specimen_type == kind)
            .map(|(j, _)| j)
            .collect())
    }

    pub fn biological_indices(&self) -> Result<Vec<usize>> {
        self.indices_of(SpecimenType::Biological)
    }

    pub fn control_indices(&self) -> Result<Vec<usize>> {
        self.indices_of(SpecimenType::NegativeControl)
    }

    /// Values of a metadata column for every specimen, in column order.
    pub fn column_values(&self, column: &str) -> Result<Vec<String>> {
        self.samples_in_order()?
            .iter()
            .map(|s| {
                s.field(column).ok_or_else(|| {
                    Error::data(format!(
                        "specimen '{}' has no value for column '{column}'",
                        s.specimen_id
                    ))
                })
            })
            .collect()
    }

    /// Restricts the dataset to the given specimens (in that order).
    pub fn select_specimens(&self, specimens: &[usize]) -> Result<Dataset> {
        let all_taxa: Vec<usize> = (0..self.counts.n_taxa()).collect();
        let counts = self.counts.select(&all_taxa, specimens)?;
        let keep: HashSet<&str> = counts.specimen_ids().iter().map(String::as_str).collect();
        Ok(Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(s.specimen_id.as_str()))
                .cloned()
                .collect(),
            size_factors: self
                .size_factors
                .as_ref()
                .map(|d| specimens.iter().map(|&j| d[j]).collect()),
            taxonomy: self.taxonomy.clone(),
            tree: self.tree.clone(),
            counts,
        })
    }

    /// Fails with the first violation when the dataset is inconsistent.
    pub fn ensure_valid(&self) -> Result<()> {
        match validate(self).into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::Data(format!("dataset failed validation: {v}"))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetDocument {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a dataset document. Structural problems are errors; semantic
    /// ones are left for [`validate`].
    pub fn from_json(text: &str) -> Result<Dataset> {
        let doc: DatasetDocument = serde_json::from_str(text)?;
        if doc.format != DATASET_FORMAT {
            return Err(Error::data(format!(
                "not a dataset document (format '{}', expected '{DATASET_FORMAT}')",
                doc.format
            )));
        }
        if doc.version != DATASET_VERSION {
            return Err(Error::data(format!("unsupported dataset version {}", doc.version)));
        }
        Ok(doc.dataset)
    }
}

pub const DATASET_FORMAT: &str = "microstat-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    format: String,
    version: u32,
    #[serde(flatten)]
    dataset: Dataset,
}

/// Checks every cross-component invariant. An empty list means the dataset
/// is usable by every analysis.
pub fn validate(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |rule: &'static str, id: &str, message: String| {
        out.push(Violation {
            rule,
            id: id.to_string(),
            message,
        })
    };
    let counts = &dataset.counts;

    if let Some(dup) = first_duplicate(counts.taxa_ids()) {
        push("unique-taxa", dup, "taxon identifier appears more than once".into());
    }
    if let Some(dup) = first_duplicate(counts.specimen_ids()) {
        push("unique-specimens", dup, "specimen identifier appears more than once".into());
    }

    let column_ids: HashSet<&str> = counts.specimen_ids().iter().map(String::as_str).collect();
    let mut meta_ids = HashSet::new();
    for s in &dataset.samples {
        if !meta_ids.insert(s.specimen_id.as_str()) {
            push("unique-metadata", &s.specimen_id, "metadata lists the specimen twice".into());
        }
        if !column_ids.contains(s.specimen_id.as_str()) {
            push(
                "metadata-matches-counts",
                &s.specimen_id,
                "specimen is listed in the metadata but absent from the count table".into(),
            );
        }
    }
    for id in counts.specimen_ids() {
        if !meta_ids.contains(id.as_str()) {
            push(
                "metadata-matches-counts",
                id,
                "specimen is in the count table but has no metadata row".into(),
            );
        }
    }
    if !dataset
        .samples
        .iter()
        .any(|s| s.specimen_type == SpecimenType::Biological)
    {
        push("has-biological", "*", "no biological specimen in the metadata".into());
    }

    if let Some(tax) = &dataset.taxonomy {
        let taxa: HashSet<&str> = counts.taxa_ids().iter().map(String::as_str).collect();
        for row in &tax.rows {
            if !taxa.contains(row.taxon_id.as_str()) {
                push(
                    "taxonomy-subset",
                    &row.taxon_id,
                    "taxonomy row for a taxon absent from the count table".into(),
                );
            }
            if row.ranks.len() != tax.rank_names.len() {
                push(
                    "taxonomy-shape",
                    &row.taxon_id,
                    format!("{} ranks, expected {}", row.ranks.len(), tax.rank_names.len()),
                );
            }
        }
    }

    if let Some(tree) = &dataset.tree {
        for v in tree.check() {
            out.push(v);
        }
    }

    if let Some(d) = &dataset.size_factors {
        if d.len() != counts.n_specimens() {
            out.push(Violation {
                rule: "size-factors-length",
                id: "size_factors".into(),
                message: format!("{} size factors for {} specimens", d.len(), counts.n_specimens()),
            });
        } else {
            for (id, &v) in counts.specimen_ids().iter().zip(d) {
                if !(v.is_finite() && v > 0.0) {
                    out.push(Violation {
                        rule: "size-factors-positive",
                        id: id.clone(),
                        message: format!("size factor {v} is not positive and finite"),
                    });
                }
            }
        }
    }
    out
}
