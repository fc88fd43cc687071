//! Crowd-style compiler flag autotuning.
//!
//! Species (tunable program pieces) are built with randomly sampled flag
//! choices, measured, and only Pareto-winning solutions are kept per
//! (species, dataset, platform, compiler). Winners are reduced to their
//! influential flags, species are clustered by winning optimization, clusters
//! are predicted from features, and decision trees drive multi-versioned
//! dispatch at run time.

pub mod autotune;
pub mod clustering;
pub mod dispatch;
pub mod flagspace;
pub mod measurement;
pub mod pareto;
pub mod predict;
pub mod repo;
pub mod statistics;
