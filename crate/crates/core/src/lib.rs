//! Scenario-based robustness benchmarking for image classifiers: corpus
//! handling, scenario synthesis, robustness scoring and factor regression.

pub mod corpus;
pub mod genclient;
pub mod imageio;
pub mod imgops;
pub mod regression;
pub mod results;
pub mod robustness;
pub mod scenarios;
pub mod toy;
