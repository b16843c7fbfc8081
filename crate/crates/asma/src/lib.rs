//! Self-supervised skeleton representation learning with asymmetric
//! spatio-temporal masking, packaged as a library plus `asma` CLI.
//!
//! The pipeline has four stages, each exposed both as an API and a CLI
//! subcommand:
//!
//! 1. **Pretraining** — two ST-GCN encoders are trained jointly with a
//!    triplet-stream Barlow Twins objective. Each encoder sees the unmasked
//!    anchor plus a spatially masked and a temporally masked view; the two
//!    encoders use complementary masking strategies (high-degree joints with
//!    low-motion frames vs. low-degree joints with high-motion frames).
//! 2. **Linear probing** — encoders frozen, a bi-directional cross-attention
//!    alignment module plus linear classifier is trained on top.
//! 3. **Fine-tuning** — encoders trained end-to-end, then the alignment
//!    module is attached and trained on the tuned encoders.
//! 4. **Distillation** — a compact student encoder learns from the frozen
//!    composite teacher via temperature-scaled KL (or feature-level cosine).
//!
//! Everything runs on CPU over a small hand-rolled reverse-mode autodiff
//! engine ([`ad`]), so every loss and layer is finite-difference checkable.
//! Synthetic data generators ([`data::generate_synthetic`]) make the full
//! pipeline runnable in minutes without any external dataset.

pub mod ad;
pub mod data;
pub mod masking;
pub mod nn;
pub mod train;
pub mod util;

/// Scalar type used throughout the crate. `f64` by default; the `f32`
/// feature switches all numerics (and checkpoint round-trips stay exact
/// because checkpoints store `f32` payloads either way).
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Deterministic RNG used for every stochastic choice in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
