//! Pixel-level domain transfer.
//!
//! A converter network maps a source-domain image (a dressed person) to a
//! target-domain image (the worn garment as a product photo). It is trained
//! adversarially against a real/fake discriminator and a domain
//! discriminator that judges whether a (source, target) pair belongs
//! together.
//!
//! This crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, image decoding and the command-line driver live in
//! the companion `pdt` crate.

#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
