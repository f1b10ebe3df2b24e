//! Core of a label-free cross-modality segmentation framework.
//!
//! The crate adapts labeled source-modality images into an unlabeled target
//! modality while jointly training a target-domain segmenter. Anatomy is kept
//! intact during adaptation by a patch contrastive loss, a modality-independent
//! neighborhood descriptor (MIND) loss and a correlation-coefficient loss.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autograd
//! engine ([`autograd`]), network builders ([`networks`]), the training
//! objectives ([`losses`], [`anatomy`]), evaluation metrics ([`metrics`]),
//! the sample containers and their binary codecs ([`sample`], [`codec`]),
//! the synthetic phantom generator ([`phantom`]) and a single optimization
//! step ([`train`]). File IO, the training loop and the CLI live in the
//! `xmodseg` companion crate.
//!
//! ## no_std support
//!
//! The `std` feature (default) only turns on runtime SIMD detection in the
//! matrix-multiply kernels and std-backed float intrinsics. Build with
//! `default-features = false` for `no_std` targets that provide a global
//! allocator.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod anatomy;
pub mod autograd;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod sample;
pub mod scalar;
pub mod tensor;
pub mod train;

mod linalg;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;
