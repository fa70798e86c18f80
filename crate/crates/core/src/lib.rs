//! A single-shot object detector with feature aggregation (FAM, SA) and
//! feature enhancement (SFE, DFE) blocks on top of an SSD-style multi-scale
//! pipeline, built on a small deterministic f64 reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, forward kernels, the gradient tape and
//!   finite-difference gradient checking.
//! - [`nn`]: parameter storage and the basic conv/BN/linear layers.
//! - [`blocks`]: spatial attention, squeeze-excitation, SFE, DFE and FAM.
//! - [`detector`]: configuration, prior boxes and the full detection graph.
//! - [`match_loss`]: box coding, prior matching and the multibox loss.
//! - [`eval`]: detection decoding, NMS and AP/mAP evaluation.
//! - [`data`]: the procedural shapes dataset, manifests and augmentation.
//! - [`train`]: schedule, SGD, checkpoints, the training loop and ablation.
//! - [`gradsuite`]: the finite-difference check of every op and block.
//! - [`config`]: the declarative run configuration.
//!
//! Data-parallel inner loops (per-image convolution, per-image decoding,
//! finite-difference probes) run on rayon when the `parallel` feature is
//! enabled and fall back to plain iterators otherwise. Results are identical
//! either way: every parallel map is collected in order and reduced
//! sequentially.

#[macro_use]
mod par;

pub mod blocks;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod match_loss;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use par::is_parallel;
pub use tensor::{Graph, Tensor, Var};
