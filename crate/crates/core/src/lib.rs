//! Compact convolutional transformers (CCT) with single-head performance
//! probing.
//!
//! The crate covers the whole measurement pipeline:
//!
//! * [`arch`] and [`model`]: declarative CCT architectures, deterministic
//!   initialization, forward and backward passes, layer-count latency.
//! * [`data`]: CIFAR binary ingestion, per-image normalization, Mixup,
//!   CutMix and Random Erasing.
//! * [`trainer`]: soft-target cross-entropy, AdamW, cosine and step
//!   schedules, freezing masks and checkpoints.
//! * [`probe`]: classifier heads on frozen prefixes, head and node
//!   silencing, label-averaged field matrices.
//! * [`cluster`]: clipping, diagonal cluster extraction and the per-block
//!   signal-to-noise statistics.
//! * [`committee`]: soft-committee decisions and pairwise agreement.
//! * [`cli`]: the `cctshp` command-line surface.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod arch;
pub mod cli;
pub mod cluster;
pub mod committee;
pub mod data;
pub mod error;
pub mod model;
pub mod probe;
pub mod synthetic;
pub mod trainer;

pub use arch::ArchitectureSpec;
pub use error::{Error, Result};
pub use model::{build_model, forward, ModelState};
