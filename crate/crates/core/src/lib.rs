//! Self-supervised contrastive pretraining toolkit for histopathology-style
//! image patches: slide tiling and foreground filtering, stochastic
//! augmentation, a small residual CNN with projection head, the NT-Xent
//! loss, LARS/LAMB/Adam optimizers, downstream probing and fine-tuning,
//! and mini-batch k-means feature clustering.
//!
//! Everything numeric is deterministic: all randomness is derived from
//! counter-based streams keyed on explicit seed components, and every
//! differentiable operation ships with finite-difference verification.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cluster;
pub mod contrastive;
pub mod data;
pub mod model;
pub mod optim;
pub mod eval;
pub mod imaging;
pub mod report;
pub mod rng;
pub mod tensorgrad;
pub mod train;
