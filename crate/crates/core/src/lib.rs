//! Statistical toolkit for microbial count tables.
//!
//! Covers the full analysis chain for amplicon count data: negative binomial
//! modeling and goodness of fit, Bayesian contaminant removal with negative
//! controls, variance-stabilizing and rank transforms, distance-based
//! ordination, permutation tests, and topic modeling with differential-topic
//! inference.

pub mod data;
pub mod decontam;
pub mod error;
pub mod genmodel;
pub mod ingest;
pub mod linalg;
mod nb;
pub mod nbglm;
pub mod ordination;
pub mod permtest;
pub mod rng;
pub mod special;
pub mod transforms;
pub mod topics;
pub mod tree;

pub use data::{library_sizes, validate, CountTable, Dataset, SampleMetadata, SpecimenType, Violation};
pub use error::{Error, Result};
pub use tree::{parse_newick, PhyloTree};
