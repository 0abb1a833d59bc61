//! Keyword-free false-trigger mitigation, end to end on a synthetic corpus:
//! weakly-labeled data generation, a lattice-based teacher, an acoustics-only
//! self-attention student trained with distillation regularization, score
//! fusion, and detection-error metrics.

pub mod aftm;
pub mod corpus;
pub mod evalkit;
pub mod lrnn;
pub mod numkit;
pub mod params;
pub mod pipeline;
pub mod train;
pub mod weaklabel;
