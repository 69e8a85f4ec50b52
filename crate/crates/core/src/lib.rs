//! Slice-propagation segmentation with epistemic uncertainty.
//!
//! The crate bundles a small autodiff engine ([`grad`]), the two slice
//! propagators ([`sliceprop`]), five uncertainty wrappers ([`uq`]),
//! evaluation metrics ([`metrics`]) and a procedural phantom generator
//! ([`phantom`]).

pub mod error;
pub mod grad;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod sliceprop;
pub mod uq;
pub mod volume;

pub use error::{Error, Result};
