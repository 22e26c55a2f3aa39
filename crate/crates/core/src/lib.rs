//! Numerical core for joint pixel- and feature-level domain adaptation.
//!
//! * [`tensor`]: dense tensors, a reverse-mode [`Graph`](tensor::Graph),
//!   gradient checking and Adam.
//! * [`objectives`]: DANN, DANN-SS and DANN-EM objectives and the
//!   alternating update.
//! * [`landscape`]: the entropy landscape of the DANN-EM target term on the
//!   probability simplex, with brute-force verification.
//! * [`flow`]: bilinear appearance-flow warping and keypoint distillation.
//! * [`cycle`]: attribute-conditioned cycle-consistent translation losses.
//! * [`harness`]: synthetic two-domain tasks, training, evaluation and model
//!   selection.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod audit;
pub mod cycle;
mod error;
pub mod flow;
pub mod harness;
pub mod landscape;
pub mod nn;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};

/// Deterministic RNG used everywhere a seed appears.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}
