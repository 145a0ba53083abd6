//! Camouflaged-object detection with a frozen vision-transformer backbone and
//! a small trainable adapter.
//!
//! The crate is organized around the lifecycle of one experiment:
//!
//! * [`autograd`], [`ops`], [`nn`] — a minimal reverse-mode tape over
//!   `ndarray`, the tensor operations built on it, and parameter storage.
//! * [`backbone`], [`adapter`], [`head`], [`model`] — the network itself: a
//!   plain ViT encoder kept frozen, a convolutional spatial prior with
//!   injector/extractor cross-attention rounds running alongside it, and a
//!   pyramid decode head producing a single-channel saliency map.
//! * [`loss`] — boundary-weighted BCE + IoU training objective.
//! * [`metrics`] — MAE, structure measure, mean enhanced-alignment measure,
//!   weighted F-measure and the combined score; [`reference`] holds slow
//!   direct-translation implementations used to cross-check them.
//! * [`optim`], [`train`], [`data`] — AdamW, the seeded training loop and the
//!   synthetic desk-scale corpus.
//! * [`multitask`] — task partitioning, the four adaptation regimes,
//!   zero-shot transfer matrices, top-k grouping and the cross-task protocol.
//! * [`archive`] — named parameter snapshots used for checkpointing.
//!
//! Everything runs on the CPU, in `f32` for the network and `f64` for
//! evaluation, and is deterministic given a seed. The crate is `no_std`
//! compatible (with `alloc`); file formats and the CLI live in the companion
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapter;
pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod fmath;
pub mod head;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod multitask;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod train;
