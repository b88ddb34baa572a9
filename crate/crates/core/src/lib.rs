//! Compact CNN–attention models for micro-CT rock volumes.
//!
//! The crate covers the full desk-scale pipeline: loading or synthesizing
//! binary voxel volumes ([`voxel`]), cutting them into 10×10×10 sub-cubes
//! and masking them for self-supervised restoration ([`sampler`]), a dense
//! reverse-mode autodiff core with an Adam optimizer and a finite-difference
//! gradient checker ([`autodiff`]), the configurable conv → multi-head
//! attention → MLP model with weight transfer and checkpointing ([`model`]),
//! and deterministic training loops with cross-validation and random
//! hyperparameter search ([`training`]).
//!
//! Every seeded entry point is a pure function of its inputs: running it
//! twice with the same seed produces bit-identical tensors, checkpoints and
//! metrics. Data-parallel loops (batch gradients, gradient checking, dataset
//! building, search trials) go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and accumulates in a fixed order so the
//! parallel and sequential builds agree bit for bit.

pub mod autodiff;
pub mod exec;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod training;
pub mod voxel;
