//! Experiment layer: synthetic corpora, the optimizer, the training loop,
//! evaluation, and ablation grids.

pub mod ablate;
pub mod eval;
pub mod optim;
pub mod synth;
pub mod train;
