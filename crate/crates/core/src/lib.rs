//! Turns instance-segmentation datasets into a multi-task vision-language
//! benchmark and scores model answers against it.

pub mod enrich;
pub mod imageops;
pub mod ingest;
pub mod model;
pub mod taskgen;
pub mod templates;
pub mod synth;
pub mod metrics;
