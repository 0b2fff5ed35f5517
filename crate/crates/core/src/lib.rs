//! Masked image modeling with online-clustered latent targets.
//!
//! A teacher (EMA of the student encoder) embeds full images; its patch
//! features are softly assigned to learned centroids and balanced with a
//! position-wise Sinkhorn-Knopp pass. The student sees a masked view, and a
//! cross-attention predictor guesses the balanced assignment of a few dropped
//! patches. Frozen-feature probes evaluate what the encoder has learned.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod augment;
pub mod autograd;
pub mod error;
pub mod masking;
pub mod network;
pub mod objective;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod workbench;

pub use error::{CapiError, Result};
