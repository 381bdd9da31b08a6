//! Representation learning and few-shot classification for single-channel
//! particle images.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`imaging`] — the 200×200 grayscale image type, PGM/PNG I/O, dataset
//!   manifests, a synthetic particle generator with an optional simulated
//!   instrument shift, and the stochastic augmentation pipeline that produces
//!   contrastive view pairs.
//! * [`encoder`] — a small convolutional backbone with a projection head,
//!   explicit forward pass and exact reverse-mode gradients, plus a
//!   supervised pre-training stage that stands in for a generic
//!   general-purpose initialization.
//! * [`ssl`] — contrastive self-supervised refinement: view-pair batches,
//!   the temperature-scaled contrastive (NT-Xent) loss with exact gradients,
//!   and the training loop.
//! * [`fewshot`] — episode sampling and the two few-shot heads: one-vs-all
//!   logistic regression and learned cosine-similarity prototypes.
//! * [`eval`] — balanced accuracy, confusion matrices, the k-shot sweep with
//!   per-draw statistics, and the cross-instrument robustness comparison.
//! * [`cache`] — the binary embedding cache that decouples encoding from
//!   evaluation.
//!
//! Every random choice is drawn from an explicitly seeded [`rng::SplitMix64`]
//! stream, so all operations are pure functions of their inputs and seeds and
//! whole runs reproduce bit-for-bit.

pub mod cache;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod imaging;
pub mod rng;
pub mod ssl;

pub use error::{Error, Result};
