//! Generalized few-shot semantic segmentation at desk scale.
//!
//! The crate trains a segmentation model in two phases. Phase one learns a
//! feature extractor, a set of base-class prototypes and a base classifier on
//! data-rich base classes. Phase two freezes everything from phase one and
//! learns novel-class prototypes and a novel classifier from K labeled images
//! per novel class, helped by three knowledge-transfer mechanisms:
//!
//! * prototype modulation — cross-attention from novel to base prototypes,
//!   fused back through a linear layer ([`prototypes`])
//! * classifier calibration — epoch-boundary mean shift and std scaling of
//!   novel classifier columns toward base-classifier statistics
//!   ([`classifiers`])
//! * context consistency — an unsupervised loss between weakly and strongly
//!   augmented unlabeled images, with a box-boundary-seeking cutout
//!   ([`augment`], [`losses`])
//!
//! Everything runs on the CPU in `f64` over a small tape-based autodiff
//! engine ([`tensor`]), so every gradient in the crate can be checked against
//! central finite differences. A synthetic shapes dataset ([`data`]) makes
//! end-to-end experiments take minutes, not GPU-days.
//!
//! The `book/` directory of the repository walks through each concept with
//! runnable snippets; those snippets compile as doctests via [`guide`].

pub mod augment;
pub mod backbone;
pub mod classifiers;
pub mod config;
pub mod data;
pub mod error;
pub mod guide;
pub mod losses;
pub mod metrics;
pub mod prototypes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Class id reserved for pixels excluded from losses and metrics.
pub const IGNORE_ID: u8 = 255;

/// Class id of the background, always zero.
pub const BACKGROUND_ID: u8 = 0;
