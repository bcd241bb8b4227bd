//! Partitioned content/style representation learning.
//!
//! An embedding is split into a *content* part, pulled together across a
//! positive pair, and a *style* part, pushed apart. The crate provides the
//! loss ([`partition`]), two host frameworks ([`vae`] and [`byol`]), data
//! synthesis for colored MNIST ([`data`]), the evaluation protocols
//! ([`eval`]), and a config-driven runner ([`runner`]).

pub mod byol;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod runner;
pub mod vae;

pub use error::{Error, Result};
pub use partition::{
    pr_loss_euclidean, pr_loss_normalized, split, swap_styles, EmbeddingBatch, Part, PartitionSpec,
    PartitionedEmbedding, PrLossBreakdown,
};
