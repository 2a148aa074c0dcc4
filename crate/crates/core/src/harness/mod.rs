//! Everything around the network: backbone, synthetic episodes, tensor
//! container I/O, configuration, training, evaluation and reports.

pub mod backbone;
pub mod config;
pub mod container;
pub mod eval;
pub mod model;
pub mod predict;
pub mod selfcheck;
pub mod synth;
pub mod train;
