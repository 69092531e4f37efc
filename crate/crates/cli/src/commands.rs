//! Subcommand implementations. Every analysis runs on biological specimens
//! only; negative controls are used by `decontam` alone.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use microstat::decontam::{call_contaminants, summaries_to_csv, DecontamSettings, McmcSettings};
use microstat::genmodel::{self, fit_nb, gof_all, size_factors_for, GofOptions, NBParams, SimScenario};
use microstat::ingest::{self, FilterSpec};
use microstat::nbglm::{rows_to_csv, wald_test};
use microstat::ordination::{self, distance, unifrac, DistanceMatrix, Metric, Ordination, UnifracVariant};
use microstat::permtest::{mst_pure_edge_test, permanova, strain_switch_power};
use microstat::topics::{self, differential_topics, fit_lda, posterior_predictive_check, ppc_to_csv, LdaSpec, TopicFit};
use microstat::transforms::{self, TransformParams, TransformTag, TransformedTable};
use microstat::{library_sizes, parse_newick, validate, Dataset, Error};

use crate::manifest::Run;
use crate::usage;

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NA".to_string()
    } else {
        format!("{x:?}")
    }
}

fn data_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Data(msg.into()).into()
}

fn load_dataset(run: &mut Run, path: &Path) -> Result<Dataset> {
    let text = run.read(path)?;
    let ds = Dataset::from_json(&text).with_context(|| format!("{} is not a readable dataset", path.display()))?;
    ds.ensure_valid().with_context(|| format!("in {}", path.display()))?;
    Ok(ds)
}

fn biological(ds: &Dataset) -> Result<Dataset> {
    let bio = ds.biological_indices()?;
    Ok(ds.select_specimens(&bio)?)
}

/// Stored size factors, else median-of-ratios over the dataset's specimens.
fn size_factors(ds: &Dataset) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..ds.counts.n_specimens()).collect();
    Ok(size_factors_for(ds, &all)?)
}

/// Values of a metadata column for the given specimen ids.
fn labels(ds: &Dataset, ids: &[String], column: &str) -> Result<Vec<String>> {
    let by_id: HashMap<&str, &microstat::SampleMetadata> =
        ds.samples.iter().map(|s| (s.specimen_id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            let s = by_id
                .get(id.as_str())
                .ok_or_else(|| data_error(format!("specimen '{id}' has no metadata row")))?;
            s.field(column)
                .ok_or_else(|| data_error(format!("specimen '{id}' has no value for column '{column}'")))
        })
        .collect()
}

// ingest

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Taxa × specimens count table.
    #[arg(long)]
    pub counts: PathBuf,
    /// Specimen metadata (specimen_id, specimen_type, ...).
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Newick tree.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Tables are comma-separated (default: tab-separated).
    #[arg(long)]
    pub csv: bool,
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
}

pub fn ingest(a: &IngestArgs, run: &mut Run) -> Result<()> {
    let delim = if a.csv { b',' } else { b'\t' };
    let text = run.read(&a.counts)?;
    let counts = ingest::parse_count_table(&text, delim).with_context(|| format!("in {}", a.counts.display()))?;
    let text = run.read(&a.samples)?;
    let samples = ingest::parse_sample_metadata(&text, delim).with_context(|| format!("in {}", a.samples.display()))?;
    let mut ds = Dataset::new(counts, samples);
    if let Some(p) = &a.taxonomy {
        let text = run.read(p)?;
        ds.taxonomy = Some(ingest::parse_taxonomy(&text, delim).with_context(|| format!("in {}", p.display()))?);
    }
    if let Some(p) = &a.tree {
        let text = run.read(p)?;
        ds.tree = Some(parse_newick(&text).with_context(|| format!("in {}", p.display()))?);
    }
    let violations = validate(&ds);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(data_error(format!("dataset failed validation:\n  {}", list.join("\n  "))));
    }
    run.write(&a.out, &ds.to_json()?)
}

// filter

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Biological specimens with fewer reads are dropped.
    #[arg(long, default_value_t = 800)]
    pub min_reads: u64,
    /// Keep taxa with ≥ min-count reads in ≥ min-specimens specimens.
    #[arg(long, default_value_t = 0)]
    pub min_count: u64,
    #[arg(long, default_value_t = 0)]
    pub min_specimens: usize,
    /// RANK=VALUE; matching taxa are removed. Repeatable.
    #[arg(long, value_name = "RANK=VALUE")]
    pub drop_taxonomy: Vec<String>,
    /// Rank that must be assigned. Repeatable.
    #[arg(long, value_name = "RANK")]
    pub require_rank: Vec<String>,
    /// Specimen to remove. Repeatable.
    #[arg(long, value_name = "ID")]
    pub exclude: Vec<String>,
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
}

pub fn filter(a: &FilterArgs, run: &mut Run) -> Result<()> {
    let ds = load_dataset(run, &a.data)?;
    let drop_taxonomy = a
        .drop_taxonomy
        .iter()
        .map(|rule| match rule.split_once('=') {
            Some((r, v)) if !r.is_empty() && !v.is_empty() => Ok((r.to_string(), v.to_string())),
            _ => Err(usage(format!("--drop-taxonomy expects RANK=VALUE, got '{rule}'"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = FilterSpec {
        min_reads_per_specimen: a.min_reads,
        min_count: a.min_count,
        min_specimens: a.min_specimens,
        drop_taxonomy,
        require_rank: a.require_rank.clone(),
        exclude_specimens: a.exclude.clone(),
    };
    let out = ingest::filter_dataset(&ds, &spec)?;
    eprintln!(
        "kept {} of {} taxa and {} of {} specimens",
        out.counts.n_taxa(),
        ds.counts.n_taxa(),
        out.counts.n_specimens(),
        ds.counts.n_specimens()
    );
    run.write(&a.out, &out.to_json()?)
}

// gof

#[derive(Debug, Args)]
pub struct GofArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Parametric bootstrap replicates per taxon.
    #[arg(long, default_value_t = 1000)]
    pub nsim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Fit without size factors (every d_j = 1).
    #[arg(long)]
    pub no_size_factors: bool,
    #[arg(long, default_value = "gof.csv")]
    pub out: PathBuf,
}

pub fn gof(a: &GofArgs, run: &mut Run) -> Result<()> {
    run.set_seed(a.seed);
    let ds = load_dataset(run, &a.data)?;
    let report = gof_all(
        &ds,
        a.nsim,
        a.seed,
        GofOptions {
            use_size_factors: !a.no_size_factors,
        },
    )?;
    let mut out = String::from(
        "taxon_id,mu,k,statistic,n_bins,p_value,p_adjusted,n_sim,observed_zeros,expected_zeros,excess_zeros,flags\n",
    );
    for r in &report.results {
        let flags: Vec<String> = r.flags.iter().map(|f| format!("{f:?}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.taxon_id,
            fmt(r.mu),
            fmt(r.k),
            fmt(r.statistic),
            r.n_bins,
            fmt(r.p_value),
            fmt(r.p_adjusted),
            r.n_sim,
            r.observed_zeros,
            fmt(r.expected_zeros),
            r.excess_zeros,
            flags.join(";")
        );
    }
    let rejected = report.results.iter().filter(|r| r.p_adjusted < 0.05).count();
    eprintln!(
        "{rejected} of {} taxa reject at BH 0.05; excess-zero fraction {:.4}",
        report.results.len(),
        report.excess_zero_fraction
    );
    run.write(&a.out, &out)
}

// decontam

#[derive(Debug, Args)]
pub struct DecontamArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// HPD interval mass.
    #[arg(long, default_value_t = 0.95)]
    pub hpd: f64,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    /// Iterations per chain, warmup included.
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Warmup iterations (default: half of --iters).
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Remove whole taxa called in at least half of the specimens.
    #[arg(long)]
    pub taxon_level: bool,
    /// Cleaned dataset.
    #[arg(long, default_value = "cleaned.json")]
    pub out: PathBuf,
    /// Per-cell report: taxon_id, specimen_id, L_r, U_r, L_c, U_c, is_contaminant.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn decontam(a: &DecontamArgs, run: &mut Run) -> Result<()> {
    run.set_seed(a.seed);
    let ds = load_dataset(run, &a.data)?;
    let settings = DecontamSettings {
        mcmc: McmcSettings {
            chains: a.chains,
            iterations: a.iters,
            warmup: a.warmup.unwrap_or(a.iters / 2),
            thin: a.thin,
        },
        hpd_level: a.hpd,
        taxon_level: a.taxon_level,
    };
    let res = call_contaminants(&ds, &settings, a.seed)?;
    eprintln!(
        "{} contaminant cells in {} taxa",
        res.n_contaminant_cells,
        res.contaminant_taxa.len()
    );
    run.write(&a.out, &res.cleaned.to_json()?)?;
    if let Some(p) = &a.report {
        run.write(p, &summaries_to_csv(&res.summaries))?;
    }
    Ok(())
}

// transform

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformMethod {
    /// Negative binomial Anscombe transform of size-factor-scaled counts.
    Anscombe,
    /// Within-specimen ranks truncated at --t.
    TruncRank,
    /// 1 when the count is at least --tau.
    Presence,
    /// Counts divided by size factors.
    Scale,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: TransformMethod,
    /// Rank threshold for trunc-rank.
    #[arg(long)]
    pub t: Option<usize>,
    /// Presence threshold.
    #[arg(long)]
    pub tau: Option<u64>,
    #[arg(long, default_value = "table.csv")]
    pub out: PathBuf,
}

/// Anscombe transform with per-taxon NB fits; taxa that cannot be fitted
/// (all zero) get the clamped dispersion and are listed as clamped.
fn anscombe_table(ds: &Dataset) -> Result<TransformedTable> {
    let d = size_factors(ds)?;
    let nb: Vec<NBParams> = (0..ds.counts.n_taxa())
        .map(|i| match fit_nb(ds.counts.row(i), &d) {
            Ok(f) => f.params,
            Err(_) => NBParams { mu: 0.0, k: 1.0 },
        })
        .collect();
    Ok(transforms::anscombe(&ds.counts, &nb, Some(&d))?)
}

pub fn transform(a: &TransformArgs, run: &mut Run) -> Result<()> {
    let ds = biological(&load_dataset(run, &a.data)?)?;
    let table = match a.method {
        TransformMethod::Anscombe => anscombe_table(&ds)?,
        TransformMethod::TruncRank => {
            let t = a.t.ok_or_else(|| usage("--method trunc-rank needs --t"))?;
            transforms::truncated_rank(&ds.counts, t)?
        }
        TransformMethod::Presence => {
            let tau = a.tau.ok_or_else(|| usage("--method presence needs --tau"))?;
            transforms::presence_absence(&ds.counts, tau)?
        }
        TransformMethod::Scale => transforms::scale_by_size_factors(&ds.counts, &size_factors(&ds)?)?,
    };
    if !table.params.clamped_taxa.is_empty() {
        eprintln!("dispersion clamped for {} taxa", table.params.clamped_taxa.len());
    }
    run.write(&a.out, &table.to_csv())
}

/// Reads a table written by `transform`.
fn parse_table(text: &str, path: &Path) -> Result<TransformedTable> {
    let err = |line: usize, msg: String| data_error(format!("{}, line {line}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty table".into()))?;
    let specimen_ids: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    if specimen_ids.is_empty() {
        return Err(err(1, "header names no specimens".into()));
    }
    let mut taxa_ids = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let mut cells = line.split(',');
        taxa_ids.push(cells.next().unwrap_or_default().to_string());
        let row: Vec<&str> = cells.collect();
        if row.len() != specimen_ids.len() {
            return Err(err(i + 2, format!("{} values for {} specimens", row.len(), specimen_ids.len())));
        }
        for c in row {
            values.push(c.parse::<f64>().map_err(|_| err(i + 2, format!("'{c}' is not a number")))?);
        }
    }
    if taxa_ids.is_empty() {
        return Err(err(2, "table has no rows".into()));
    }
    Ok(TransformedTable {
        taxa_ids,
        specimen_ids,
        values,
        tag: TransformTag::Scaled,
        params: TransformParams::default(),
    })
}

// ordinate and test

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Bray,
    Jaccard,
    Euclidean,
    /// Unweighted UniFrac on the dataset's tree.
    Unifrac,
    /// Normalized weighted UniFrac on the dataset's tree.
    Wunifrac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrdinationArg {
    Pcoa,
    Pca,
    Ca,
}

/// Specimen distances. UniFrac uses the counts and tree; other metrics use
/// `table` when given, else counts divided by size factors.
fn specimen_distances(ds: &Dataset, table: Option<&TransformedTable>, metric: MetricArg) -> Result<DistanceMatrix> {
    let variant = match metric {
        MetricArg::Bray => return Ok(distance(&value_table(ds, table)?, Metric::BrayCurtis)?),
        MetricArg::Jaccard => return Ok(distance(&value_table(ds, table)?, Metric::Jaccard)?),
        MetricArg::Euclidean => return Ok(distance(&value_table(ds, table)?, Metric::Euclidean)?),
        MetricArg::Unifrac => UnifracVariant::Unweighted,
        MetricArg::Wunifrac => UnifracVariant::WeightedNormalized,
    };
    let tree = ds.tree.as_ref().ok_or_else(|| data_error("UniFrac needs a tree in the dataset"))?;
    Ok(unifrac(&ds.counts, tree, variant)?)
}

fn value_table(ds: &Dataset, table: Option<&TransformedTable>) -> Result<TransformedTable> {
    match table {
        Some(t) => Ok(t.clone()),
        None => Ok(transforms::scale_by_size_factors(&ds.counts, &size_factors(ds)?)?),
    }
}

fn load_table(run: &mut Run, path: Option<&Path>) -> Result<Option<TransformedTable>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = run.read(p)?;
            Ok(Some(parse_table(&text, p)?))
        }
    }
}

#[derive(Debug, Args)]
pub struct OrdinateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Transformed table from `transform` (default: size-factor-scaled counts).
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bray")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "pcoa")]
    pub method: OrdinationArg,
    #[arg(long, default_value_t = 2)]
    pub axes: usize,
    /// Specimen coordinates.
    #[arg(long, default_value = "coords.csv")]
    pub out: PathBuf,
    /// Eigenvalues and variance explained per axis.
    #[arg(long)]
    pub axes_out: Option<PathBuf>,
    /// Scatter of the first two axes.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Metadata column used to color the scatter.
    #[arg(long, default_value = "group")]
    pub color: String,
}

pub fn ordinate(a: &OrdinateArgs, run: &mut Run) -> Result<()> {
    if a.axes == 0 {
        return Err(usage("--axes must be at least 1"));
    }
    let full = load_dataset(run, &a.data)?;
    let ds = biological(&full)?;
    let table = load_table(run, a.table.as_deref())?;
    let ord: Ordination = match a.method {
        OrdinationArg::Pcoa => ordination::pcoa(&specimen_distances(&ds, table.as_ref(), a.metric)?, a.axes)?,
        OrdinationArg::Pca => ordination::pca(&value_table(&ds, table.as_ref())?, a.axes)?,
        OrdinationArg::Ca => ordination::correspondence_analysis(&ds.counts, a.axes)?,
    };
    run.write(&a.out, &ord.to_csv())?;
    if let Some(p) = &a.axes_out {
        run.write(p, &ord.axes_csv())?;
    }
    if let Some(p) = &a.svg {
        let colors: Option<Vec<String>> = ord
            .ids
            .iter()
            .map(|id| full.samples.iter().find(|s| &s.specimen_id == id).and_then(|s| s.field(&a.color)))
            .collect();
        let title = format!("{:?}", a.method).to_uppercase();
        run.write(p, &ordination::scatter_svg(&ord, colors.as_deref(), &title)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestMethod {
    Permanova,
    /// Pure-edge count of the minimum spanning tree.
    Mst,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bray")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "permanova")]
    pub method: TestMethod,
    /// Metadata column holding group labels.
    #[arg(long)]
    pub group: String,
    /// Metadata column defining exchangeable blocks (PERMANOVA only).
    #[arg(long)]
    pub blocks: Option<String>,
    #[arg(long, default_value_t = 9999)]
    pub nperm: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "test.csv")]
    pub out: PathBuf,
}

pub fn test(a: &TestArgs, run: &mut Run) -> Result<()> {
    run.set_seed(a.seed);
    if a.blocks.is_some() && a.method == TestMethod::Mst {
        return Err(usage("--blocks applies to PERMANOVA only"));
    }
    let full = load_dataset(run, &a.data)?;
    let ds = biological(&full)?;
    let table = load_table(run, a.table.as_deref())?;
    let d = specimen_distances(&ds, table.as_ref(), a.metric)?;
    let groups = labels(&full, &d.ids, &a.group)?;
    let res = match a.method {
        TestMethod::Permanova => {
            let blocks = a.blocks.as_ref().map(|b| labels(&full, &d.ids, b)).transpose()?;
            permanova(&d, &groups, a.nperm, a.seed, blocks.as_deref())?
        }
        TestMethod::Mst => mst_pure_edge_test(&d, &groups, a.nperm, a.seed)?,
    };
    for f in &res.flags {
        eprintln!("note: {f:?}");
    }
    run.write(&a.out, &res.to_csv())
}

// power and simulate

fn load_scenario(run: &mut Run, path: &Path) -> Result<SimScenario> {
    let text = run.read(path)?;
    serde_json::from_str(&text)
        .map_err(|e| data_error(format!("{}: invalid scenario: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Replicate datasets per grid point.
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Switched fraction of each group at each grid point.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 999)]
    pub nperm: usize,
    /// Defaults to the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "power.csv")]
    pub out: PathBuf,
}

pub fn power(a: &PowerArgs, run: &mut Run) -> Result<()> {
    let scenario = load_scenario(run, &a.scenario)?;
    let seed = a.seed.unwrap_or(scenario.seed);
    run.set_seed(seed);
    let cmp = strain_switch_power(&scenario, &a.grid, a.reps, a.alpha, a.nperm, seed)?;
    run.write(&a.out, &cmp.to_csv())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
}

pub fn simulate(a: &SimulateArgs, run: &mut Run) -> Result<()> {
    let mut scenario = load_scenario(run, &a.scenario)?;
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    run.set_seed(scenario.seed);
    let ds = genmodel::simulate(&scenario)?;
    run.write(&a.out, &ds.to_json()?)
}

// topics

const TOPICS_FORMAT: &str = "microstat-topics";

/// A topic fit together with the specimens it was fitted to.
#[derive(Serialize, Deserialize)]
struct TopicsDocument {
    format: String,
    dataset: Dataset,
    fit: TopicFit,
}

fn load_topics(run: &mut Run, path: &Path) -> Result<TopicsDocument> {
    let text = run.read(path)?;
    let doc: TopicsDocument =
        serde_json::from_str(&text).map_err(|e| data_error(format!("{}: not a topic fit: {e}", path.display())))?;
    if doc.format != TOPICS_FORMAT {
        return Err(data_error(format!("{}: not a topic fit (format '{}')", path.display(), doc.format)));
    }
    Ok(doc)
}

#[derive(Debug, Args)]
pub struct TopicsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of topics.
    #[arg(long = "T", value_name = "T")]
    pub topics: usize,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub warmup: usize,
    /// Keep every thin-th post-warmup draw.
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Above this many reads the sampler works on per-cell counts.
    #[arg(long, default_value_t = topics::DEFAULT_MAX_TOKENS)]
    pub max_tokens: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "fit.json")]
    pub out: PathBuf,
    /// Posterior mean θ per specimen.
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Posterior mean β per topic.
    #[arg(long)]
    pub beta: Option<PathBuf>,
    /// R̂ and ESS of every θ and β component.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

pub fn topics(a: &TopicsArgs, run: &mut Run) -> Result<()> {
    run.set_seed(a.seed);
    let ds = biological(&load_dataset(run, &a.data)?)?;
    let spec = LdaSpec {
        topics: a.topics,
        alpha: a.alpha,
        gamma: a.gamma,
        chains: a.chains,
        iters: a.iters,
        warmup: a.warmup,
        thin: a.thin,
        max_tokens: a.max_tokens,
        seed: a.seed,
    };
    let fit = fit_lda(&ds.counts, &spec)?;
    if let Some(q) = fit.diagnostics.as_ref().and_then(|d| d.rhat_summary.as_ref()) {
        eprintln!("R-hat median {:.4}, max {:.4}", q.median, q.max);
    }
    for f in &fit.flags {
        eprintln!("note: {f:?}");
    }
    if let Some(p) = &a.theta {
        run.write(p, &fit.theta_csv())?;
    }
    if let Some(p) = &a.beta {
        run.write(p, &fit.beta_csv())?;
    }
    if let Some(p) = &a.diagnostics {
        let csv = fit
            .diagnostics_csv()
            .ok_or_else(|| usage("diagnostics need at least 2 chains of at least 4 draws"))?;
        run.write(p, &csv)?;
    }
    let doc = TopicsDocument {
        format: TOPICS_FORMAT.to_string(),
        dataset: ds,
        fit,
    };
    run.write(&a.out, &serde_json::to_string(&doc)?)
}

#[derive(Debug, Args)]
pub struct TopicsDiffArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Metadata column with exactly two groups.
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value = "topics_diff.csv")]
    pub out: PathBuf,
}

pub fn topics_diff(a: &TopicsDiffArgs, run: &mut Run) -> Result<()> {
    let doc = load_topics(run, &a.fit)?;
    let sizes = library_sizes(&doc.dataset.counts)?;
    let groups = labels(&doc.dataset, &doc.fit.specimen_ids, &a.group)?;
    let rows = differential_topics(&doc.fit, &sizes, &groups)?;
    run.write(&a.out, &rows_to_csv(&rows, "Topic"))
}

#[derive(Debug, Args)]
pub struct TopicsPpcArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Posterior draws used for replicates.
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "ppc.csv")]
    pub out: PathBuf,
}

pub fn topics_ppc(a: &TopicsPpcArgs, run: &mut Run) -> Result<()> {
    run.set_seed(a.seed);
    let doc = load_topics(run, &a.fit)?;
    let rows = posterior_predictive_check(&doc.fit, &doc.dataset.counts, a.draws, a.seed)?;
    run.write(&a.out, &ppc_to_csv(&rows))
}

// diff

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Metadata column with exactly two groups.
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value = "diff.csv")]
    pub out: PathBuf,
}

pub fn diff(a: &DiffArgs, run: &mut Run) -> Result<()> {
    let ds = biological(&load_dataset(run, &a.data)?)?;
    let groups = labels(&ds, ds.counts.specimen_ids(), &a.group)?;
    let rows = wald_test(&ds.counts, &groups, &size_factors(&ds)?)?;
    run.write(&a.out, &rows_to_csv(&rows, "taxon_id"))
}
