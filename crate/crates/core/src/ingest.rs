//! Parsers for the delimited input tables and Newick trees, and the
//! specimen/taxon filtering rules.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{CountTable, Dataset, SampleMetadata, SpecimenType, TaxonomyRow, TaxonomyTable};
use crate::error::{Error, Result};

pub use crate::tree::parse_newick;

fn reader(text: &str, delimiter: u8) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn parse_err(line: u64, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        column,
        message: message.into(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(line, 0, e.to_string())
}

/// Parses a count table: header row of specimen ids (the first header cell
/// is ignored), then one row per taxon with its id followed by integer counts.
pub fn parse_count_table(text: &str, delimiter: u8) -> Result<CountTable> {
    let mut rdr = reader(text, delimiter);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| parse_err(1, 1, "empty count table"))?
        .map_err(csv_err)?;
    let specimen_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if specimen_ids.is_empty() {
        return Err(parse_err(1, 1, "header has no specimen columns"));
    }
    let mut seen = HashSet::new();
    for (c, id) in specimen_ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(parse_err(1, c + 2, format!("duplicate specimen identifier '{id}'")));
        }
    }
    let mut taxa_ids = Vec::new();
    let mut counts = Vec::new();
    let mut seen_taxa = HashSet::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != specimen_ids.len() + 1 {
            return Err(parse_err(
                line,
                record.len(),
                format!("ragged row: {} fields, expected {}", record.len(), specimen_ids.len() + 1),
            ));
        }
        let taxon = record[0].trim().to_string();
        if !seen_taxa.insert(taxon.clone()) {
            return Err(parse_err(line, 1, format!("duplicate taxon identifier '{taxon}'")));
        }
        for (c, cell) in record.iter().skip(1).enumerate() {
            let value: u64 = cell.trim().parse().map_err(|_| {
                parse_err(
                    line,
                    c + 2,
                    format!(
                        "row {taxon}, specimen {}: '{}' is not a non-negative integer",
                        specimen_ids[c],
                        cell.trim()
                    ),
                )
            })?;
            counts.push(value);
        }
        taxa_ids.push(taxon);
    }
    if taxa_ids.is_empty() {
        return Err(parse_err(1, 1, "count table has no taxon rows"));
    }
    CountTable::new(taxa_ids, specimen_ids, counts)
}

/// Inverse of [`parse_count_table`].
pub fn write_count_table(table: &CountTable, delimiter: u8) -> String {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(Vec::new());
    let mut header = vec!["taxon_id".to_string()];
    header.extend(table.specimen_ids().iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for (i, id) in table.taxa_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(table.row(i).iter().map(u64::to_string));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

/// Parses specimen metadata. Required columns: `specimen_id`,
/// `specimen_type`; optional: `subject_id`, `batch`, `group`, `pair_id`.
/// Other columns are kept as free-form fields.
pub fn parse_sample_metadata(text: &str, delimiter: u8) -> Result<Vec<SampleMetadata>> {
    let mut rdr = reader(text, delimiter);
    let mut records = rdr.records();
    let header: Vec<String> = records
        .next()
        .ok_or_else(|| parse_err(1, 1, "empty sample table"))?
        .map_err(csv_err)?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let id_col = col("specimen_id").ok_or_else(|| parse_err(1, 1, "missing required column 'specimen_id'"))?;
    let type_col = col("specimen_type").ok_or_else(|| parse_err(1, 1, "missing required column 'specimen_type'"))?;
    let (subject_col, batch_col, group_col, pair_col) = (col("subject_id"), col("batch"), col("group"), col("pair_id"));
    let known: HashSet<usize> = [Some(id_col), Some(type_col), subject_col, batch_col, group_col, pair_col]
        .into_iter()
        .flatten()
        .collect();

    let mut out = Vec::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != header.len() {
            return Err(parse_err(line, record.len(), "ragged row in sample table"));
        }
        let cell = |c: usize| record[c].trim().to_string();
        let opt = |c: Option<usize>| c.map(cell).filter(|s| !s.is_empty() && s != "NA");
        let specimen_id = cell(id_col);
        let specimen_type: SpecimenType = cell(type_col)
            .parse()
            .map_err(|e: Error| parse_err(line, type_col + 1, e.to_string()))?;
        let batch = match opt(batch_col) {
            None => 0,
            Some(b) => b
                .parse()
                .map_err(|_| parse_err(line, batch_col.unwrap() + 1, format!("batch '{b}' is not an integer")))?,
        };
        let extra: BTreeMap<String, String> = header
            .iter()
            .enumerate()
            .filter(|(c, _)| !known.contains(c))
            .map(|(c, h)| (h.clone(), cell(c)))
            .collect();
        out.push(SampleMetadata {
            subject_id: opt(subject_col).unwrap_or_else(|| specimen_id.clone()),
            specimen_id,
            specimen_type,
            batch,
            group: opt(group_col),
            pair_id: opt(pair_col),
            extra,
        });
    }
    Ok(out)
}

/// Parses a taxonomy table: `taxon_id` then one column per rank. Empty
/// cells and `NA` mean unassigned.
pub fn parse_taxonomy(text: &str, delimiter: u8) -> Result<TaxonomyTable> {
    let mut rdr = reader(text, delimiter);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| parse_err(1, 1, "empty taxonomy table"))?
        .map_err(csv_err)?;
    let rank_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != rank_names.len() + 1 {
            return Err(parse_err(line, record.len(), "ragged row in taxonomy table"));
        }
        rows.push(TaxonomyRow {
            taxon_id: record[0].trim().to_string(),
            ranks: record
                .iter()
                .skip(1)
                .map(|s| s.trim())
                .map(|s| (!s.is_empty() && s != "NA").then(|| s.to_string()))
                .collect(),
        });
    }
    Ok(TaxonomyTable { rank_names, rows })
}

/// Specimen and taxon filtering rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    /// Biological specimens with fewer reads are dropped (empty ones always
    /// are). Negative controls are exempt so that contaminant modeling keeps
    /// its controls.
    pub min_reads_per_specimen: u64,
    /// A taxon is kept when it has at least `min_count` reads in at least
    /// `min_specimens` specimens.
    pub min_count: u64,
    pub min_specimens: usize,
    /// (rank, value) pairs; matching taxa are removed (e.g. Family=Mitochondria).
    pub drop_taxonomy: Vec<(String, String)>,
    /// Ranks that must be assigned (e.g. Kingdom, Phylum).
    pub require_rank: Vec<String>,
    /// Specimens removed by identifier.
    pub exclude_specimens: Vec<String>,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            min_reads_per_specimen: 800,
            min_count: 0,
            min_specimens: 0,
            drop_taxonomy: Vec::new(),
            require_rank: Vec::new(),
            exclude_specimens: Vec::new(),
        }
    }
}

impl FilterSpec {
    /// Every threshold at zero and no rules.
    pub fn permissive() -> Self {
        FilterSpec {
            min_reads_per_specimen: 0,
            ..FilterSpec::default()
        }
    }
}

fn taxonomy_keeps(dataset: &Dataset, spec: &FilterSpec) -> Result<Vec<bool>> {
    let m = dataset.counts.n_taxa();
    if spec.drop_taxonomy.is_empty() && spec.require_rank.is_empty() {
        return Ok(vec![true; m]);
    }
    let tax = dataset
        .taxonomy
        .as_ref()
        .ok_or_else(|| Error::precondition("taxonomy rules given but the dataset has no taxonomy"))?;
    let rank = |name: &str| {
        tax.rank_index(name)
            .ok_or_else(|| Error::data(format!("taxonomy has no rank named '{name}'")))
    };
    let drops = spec
        .drop_taxonomy
        .iter()
        .map(|(r, v)| Ok((rank(r)?, v.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let required = spec.require_rank.iter().map(|r| rank(r)).collect::<Result<Vec<_>>>()?;
    Ok(dataset
        .counts
        .taxa_ids()
        .iter()
        .map(|id| match tax.lookup(id) {
            None => required.is_empty(),
            Some(row) => {
                let value = |r: usize| row.ranks.get(r).and_then(|v| v.as_deref());
                required.iter().all(|&r| value(r).is_some())
                    && !drops
                        .iter()
                        .any(|&(r, v)| value(r).is_some_and(|x| x.eq_ignore_ascii_case(v)))
            }
        })
        .collect())
}

/// Applies `spec`, returning the surviving dataset.
///
/// Dropping taxa lowers library sizes, which can push a specimen under the
/// read threshold, which in turn changes taxon prevalence; the rules are
/// therefore iterated to a fixed point so that filtering is idempotent.
/// Size factors are cleared since they no longer describe the table.
pub fn filter_dataset(dataset: &Dataset, spec: &FilterSpec) -> Result<Dataset> {
    let counts = &dataset.counts;
    let samples = dataset.samples_in_order()?;
    let tax_keep = taxonomy_keeps(dataset, spec)?;
    let excluded: HashSet<&str> = spec.exclude_specimens.iter().map(String::as_str).collect();

    let mut taxa: Vec<bool> = tax_keep;
    let mut specimens: Vec<bool> = samples
        .iter()
        .map(|s| !excluded.contains(s.specimen_id.as_str()))
        .collect();
    loop {
        let mut changed = false;
        for j in 0..counts.n_specimens() {
            if !specimens[j] || samples[j].specimen_type == SpecimenType::NegativeControl {
                continue;
            }
            let reads: u64 = (0..counts.n_taxa()).filter(|&i| taxa[i]).map(|i| counts.get(i, j)).sum();
            if reads < spec.min_reads_per_specimen.max(1) {
                specimens[j] = false;
                changed = true;
            }
        }
        for i in 0..counts.n_taxa() {
            if !taxa[i] {
                continue;
            }
            let prevalence = counts
                .row(i)
                .iter()
                .zip(&specimens)
                .filter(|&(&k, &keep)| keep && k >= spec.min_count)
                .count();
            if prevalence < spec.min_specimens {
                taxa[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let taxa_idx: Vec<usize> = (0..counts.n_taxa()).filter(|&i| taxa[i]).collect();
    let spec_idx: Vec<usize> = (0..counts.n_specimens()).filter(|&j| specimens[j]).collect();
    if taxa_idx.is_empty() || spec_idx.is_empty() {
        return Err(Error::data(format!(
            "filtering left {} taxa and {} specimens",
            taxa_idx.len(),
            spec_idx.len()
        )));
    }
    let new_counts = counts.select(&taxa_idx, &spec_idx)?;
    let kept_taxa: HashSet<&str> = new_counts.taxa_ids().iter().map(String::as_str).collect();
    let kept_specimens: HashSet<&str> = new_counts.specimen_ids().iter().map(String::as_str).collect();
    let out_samples: Vec<SampleMetadata> = dataset
        .samples
        .iter()
        .filter(|s| kept_specimens.contains(s.specimen_id.as_str()))
        .cloned()
        .collect();
    if !out_samples.iter().any(|s| s.specimen_type == SpecimenType::Biological) {
        return Err(Error::data("filtering removed every biological specimen"));
    }
    let taxonomy = dataset.taxonomy.as_ref().map(|t| TaxonomyTable {
        rank_names: t.rank_names.clone(),
        rows: t
            .rows
            .iter()
            .filter(|r| kept_taxa.contains(r.taxon_id.as_str()))
            .cloned()
            .collect(),
    });
    let tree = dataset.tree.as_ref().and_then(|t| t.prune_to(&kept_taxa));

    Ok(Dataset {
        counts: new_counts,
        samples: out_samples,
        taxonomy,
        tree,
        size_factors: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn parses_small_tsv() {
        let t = parse_count_table("t\ts1\ts2\nA\t1\t0\nB\t2\t3", b'\t').unwrap();
        assert_eq!((t.n_taxa(), t.n_specimens()), (2, 2));
        assert_eq!(t.row(0), &[1, 0]);
        assert_eq!(t.row(1), &[2, 3]);
    }

    #[test]
    fn negative_cell_names_row_and_specimen() {
        let err = parse_count_table("t\ts1\ts2\nA\t-1\t0\n", b'\t').unwrap_err().to_string();
        assert!(err.contains("row A, specimen s1"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn ragged_and_duplicate_rows_rejected() {
        assert!(parse_count_table("t\ts1\ts2\nA\t1\n", b'\t').is_err());
        assert!(parse_count_table("t\ts1\nA\t1\nA\t2\n", b'\t').is_err());
        assert!(parse_count_table("t\ts1\ts1\nA\t1\t2\n", b'\t').is_err());
        assert!(parse_count_table("t,s1\nA,1.5\n", b',').is_err());
    }

    #[test]
    fn csv_and_metadata() {
        let t = parse_count_table("taxon,a,b\nX,3,4\n", b',').unwrap();
        assert_eq!(t.row(0), &[3, 4]);
        let meta = parse_sample_metadata(
            "specimen_id\tspecimen_type\tgroup\tplant\na\tbiological\tO\tsonchus\nb\tcontrol\t\tNA\n",
            b'\t',
        )
        .unwrap();
        assert_eq!(meta[0].group.as_deref(), Some("O"));
        assert_eq!(meta[0].field("plant").as_deref(), Some("sonchus"));
        assert_eq!(meta[1].specimen_type, SpecimenType::NegativeControl);
        assert_eq!(meta[1].subject_id, "b");
        assert!(parse_sample_metadata("specimen_id\nA\n", b'\t').is_err());
    }

    fn dataset_from(rows: Vec<Vec<u64>>) -> Dataset {
        let m = rows.len();
        let n = rows[0].len();
        let counts = CountTable::from_rows(
            (0..m).map(|i| format!("t{i}")).collect(),
            (0..n).map(|j| format!("s{j}")).collect(),
            rows,
        )
        .unwrap();
        let samples = (0..n).map(|j| SampleMetadata::biological(format!("s{j}"))).collect();
        Dataset::new(counts, samples)
    }

    #[test]
    fn prevalence_threshold() {
        let ds = dataset_from(vec![vec![30, 30, 0, 5], vec![30, 0, 0, 5], vec![1, 1, 1, 1]]);
        let spec = FilterSpec {
            min_reads_per_specimen: 0,
            min_count: 25,
            min_specimens: 2,
            ..FilterSpec::default()
        };
        let out = filter_dataset(&ds, &spec).unwrap();
        assert_eq!(out.counts.taxa_ids(), &["t0".to_string()]);
        // s2 has no reads of t0 left and is dropped as empty
        assert_eq!(out.counts.specimen_ids(), &["s0".to_string(), "s1".into(), "s3".into()]);
    }

    #[test]
    fn permissive_spec_is_identity() {
        let ds = dataset_from(vec![vec![3, 0, 2], vec![0, 4, 1]]);
        let out = filter_dataset(&ds, &FilterSpec::permissive()).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn taxonomy_rules_and_tree_pruning() {
        let mut ds = dataset_from(vec![vec![5, 5], vec![5, 5], vec![5, 5]]);
        ds.taxonomy = Some(TaxonomyTable {
            rank_names: vec!["Kingdom".into(), "Family".into()],
            rows: vec![
                TaxonomyRow { taxon_id: "t0".into(), ranks: vec![Some("Bacteria".into()), Some("Mitochondria".into())] },
                TaxonomyRow { taxon_id: "t1".into(), ranks: vec![None, Some("X".into())] },
                TaxonomyRow { taxon_id: "t2".into(), ranks: vec![Some("Bacteria".into()), None] },
            ],
        });
        ds.tree = Some(parse_newick("((t0:1,t1:1):1,t2:2);").unwrap());
        let spec = FilterSpec {
            drop_taxonomy: vec![("family".into(), "mitochondria".into())],
            require_rank: vec!["Kingdom".into()],
            ..FilterSpec::permissive()
        };
        let out = filter_dataset(&ds, &spec).unwrap();
        assert_eq!(out.counts.taxa_ids(), &["t2".to_string()]);
        let leaves: Vec<&str> = out.tree.as_ref().unwrap().leaves().map(|(_, l)| l).collect();
        assert_eq!(leaves, vec!["t2"]);
        assert_eq!(out.taxonomy.unwrap().rows.len(), 1);
    }

    #[test]
    fn emptying_filter_is_an_error() {
        let ds = dataset_from(vec![vec![3, 0, 2]]);
        let spec = FilterSpec { min_reads_per_specimen: 100, ..FilterSpec::default() };
        assert!(filter_dataset(&ds, &spec).is_err());
    }

    /// Brute-force fixed point, written independently of `filter_dataset`.
    fn oracle(rows: &[Vec<u64>], min_reads: u64, min_count: u64, min_spec: usize) -> (Vec<usize>, Vec<usize>) {
        let (m, n) = (rows.len(), rows[0].len());
        let mut taxa: Vec<usize> = (0..m).collect();
        let mut specs: Vec<usize> = (0..n).collect();
        loop {
            let new_specs: Vec<usize> = specs
                .iter()
                .copied()
                .filter(|&j| taxa.iter().map(|&i| rows[i][j]).sum::<u64>() >= min_reads.max(1))
                .collect();
            let new_taxa: Vec<usize> = taxa
                .iter()
                .copied()
                .filter(|&i| new_specs.iter().filter(|&&j| rows[i][j] >= min_count).count() >= min_spec)
                .collect();
            if new_taxa == taxa && new_specs == specs {
                return (taxa, specs);
            }
            taxa = new_taxa;
            specs = new_specs;
        }
    }

    proptest! {
        #[test]
        fn count_table_round_trip(seed in any::<u64>()) {
            let mut r = rng::stream(seed, 0);
            let rows: Vec<Vec<u64>> = (0..100).map(|_| (0..20).map(|_| r.random_range(0..5000u64)).collect()).collect();
            let t = CountTable::from_rows(
                (0..100).map(|i| format!("ASV_{i}")).collect(),
                (0..20).map(|j| format!("E-{j}")).collect(),
                rows,
            ).unwrap();
            prop_assert_eq!(parse_count_table(&write_count_table(&t, b'\t'), b'\t').unwrap(), t.clone());
            prop_assert_eq!(parse_count_table(&write_count_table(&t, b','), b',').unwrap(), t);
        }

        #[test]
        fn filter_matches_oracle_and_is_idempotent(
            rows in proptest::collection::vec(proptest::collection::vec(0u64..60, 8), 12),
            min_reads in 0u64..200,
            min_count in 0u64..40,
            min_spec in 0usize..5,
        ) {
            let ds = dataset_from(rows.clone());
            let spec = FilterSpec { min_reads_per_specimen: min_reads, min_count, min_specimens: min_spec, ..FilterSpec::default() };
            let (taxa, specs) = oracle(&rows, min_reads, min_count, min_spec);
            match filter_dataset(&ds, &spec) {
                Ok(out) => {
                    let want_t: Vec<String> = taxa.iter().map(|i| format!("t{i}")).collect();
                    let want_s: Vec<String> = specs.iter().map(|j| format!("s{j}")).collect();
                    prop_assert_eq!(out.counts.taxa_ids(), &want_t[..]);
                    prop_assert_eq!(out.counts.specimen_ids(), &want_s[..]);
                    let again = filter_dataset(&out, &spec).unwrap();
                    prop_assert_eq!(again, out);
                }
                Err(_) => prop_assert!(taxa.is_empty() || specs.is_empty()),
            }
        }
    }
}
