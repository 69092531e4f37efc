//! `microstat`: every analysis stage as a subcommand, plus a pipeline runner.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

mod commands;
mod manifest;
mod pipeline;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::*;

#[derive(Debug, Parser)]
#[command(name = "microstat", version, about = "Statistical toolkit for microbial count tables")]
pub struct Cli {
    /// Cap on worker threads for every parallel stage.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bundle count, sample, taxonomy and tree files into one dataset.
    Ingest(IngestArgs),
    /// Drop specimens and taxa by read thresholds and taxonomy rules.
    Filter(FilterArgs),
    /// Negative binomial goodness of fit per taxon.
    Gof(GofArgs),
    /// Bayesian contaminant calls against negative controls.
    Decontam(DecontamArgs),
    /// Variance-stabilizing, rank, presence or size-factor transforms.
    Transform(TransformArgs),
    /// Distances and PCoA, PCA or correspondence analysis.
    Ordinate(OrdinateArgs),
    /// PERMANOVA or minimum-spanning-tree permutation test.
    Test(TestArgs),
    /// Permutation-test power with and without strain switching.
    Power(PowerArgs),
    /// Fit a topic model by collapsed Gibbs sampling.
    Topics(TopicsArgs),
    /// Differential topic abundance between two groups.
    #[command(name = "topics-diff")]
    TopicsDiff(TopicsDiffArgs),
    /// Posterior predictive check of a topic fit.
    #[command(name = "topics-ppc")]
    TopicsPpc(TopicsPpcArgs),
    /// Taxon-level negative binomial Wald test between two groups.
    Diff(DiffArgs),
    /// Draw a dataset from a simulation scenario.
    Simulate(SimulateArgs),
    /// Run stages listed in a config file.
    Pipeline(PipelineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Filter(_) => "filter",
            Command::Gof(_) => "gof",
            Command::Decontam(_) => "decontam",
            Command::Transform(_) => "transform",
            Command::Ordinate(_) => "ordinate",
            Command::Test(_) => "test",
            Command::Power(_) => "power",
            Command::Topics(_) => "topics",
            Command::TopicsDiff(_) => "topics-diff",
            Command::TopicsPpc(_) => "topics-ppc",
            Command::Diff(_) => "diff",
            Command::Simulate(_) => "simulate",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct PipelineArgs {
    /// Stage list, one stage per line.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for intermediate and final outputs.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// A usage problem found after argument parsing (exit 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<microstat::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

/// Runs one parsed command; returns the files written.
pub fn execute(cli: Cli, argv: Vec<String>) -> Result<Vec<PathBuf>> {
    let threads = cli.threads;
    let mut run = manifest::Run::new(cli.command.name(), argv, threads);
    match cli.command {
        Command::Ingest(a) => ingest(&a, &mut run)?,
        Command::Filter(a) => filter(&a, &mut run)?,
        Command::Gof(a) => gof(&a, &mut run)?,
        Command::Decontam(a) => decontam(&a, &mut run)?,
        Command::Transform(a) => transform(&a, &mut run)?,
        Command::Ordinate(a) => ordinate(&a, &mut run)?,
        Command::Test(a) => test(&a, &mut run)?,
        Command::Power(a) => power(&a, &mut run)?,
        Command::Topics(a) => topics(&a, &mut run)?,
        Command::TopicsDiff(a) => topics_diff(&a, &mut run)?,
        Command::TopicsPpc(a) => topics_ppc(&a, &mut run)?,
        Command::Diff(a) => diff(&a, &mut run)?,
        Command::Simulate(a) => simulate(&a, &mut run)?,
        Command::Pipeline(a) => return pipeline::run_pipeline(&a, threads),
    }
    Ok(run.written().to_vec())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli, argv) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
