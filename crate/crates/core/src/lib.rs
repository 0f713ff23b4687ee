//! Desk-scale laboratory for softmax utility learning and its dual
//! probabilities.
//!
//! The crate treats a softmax-normalized model's logits as per-token
//! utilities and builds the full loop around that view: a family of
//! perturbed-advantage trainers with likelihood ascent as one member, the
//! dual transform mapping utilities back to probability estimates, every
//! probability-based decision rule (greedy, sampling, beam search, exact
//! maximum a-posteriori search), and synthetic tasks whose ground-truth
//! conditionals are exactly computable so that each formal claim can be
//! checked against brute-force oracles.
//!
//! Modules map one-to-one onto the subsystems: [`math`] holds the per-step
//! kernels, [`model`] the differentiable Q-models, [`tasks`] the synthetic
//! generators, [`training`] the trainer and forward evaluators, [`decoding`]
//! the decision rules, [`analysis`] the fixed-point and oracle suites, and
//! [`rng`] the counter-based random streams. Inner loops that are
//! data-parallel (per-pair batch gradients, per-instance evaluation) go
//! through [`parallel`], which runs on rayon under the default `parallel`
//! feature and sequentially without it; results are merged in fixed order so
//! outputs are bit-identical either way.

pub mod analysis;
pub mod decoding;
pub mod math;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tasks;
pub mod training;

/// Vocabulary token id. Index 0 is reserved for EOS everywhere.
pub type Token = usize;

/// The end-of-sequence token id shared by models, tasks, and decoders.
pub const EOS: Token = 0;
