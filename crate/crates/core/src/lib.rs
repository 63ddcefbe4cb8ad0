//! Spatiotemporal fusion strategies of factorized 3D CNNs, embedded in a
//! probability space by training a gated template network with variational
//! DropPath.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: float64 tensors, reverse-mode tape, SGD.
//! - [`data`]: synthetic labeled clips with controllable spatial/temporal signal.
//! - [`fusion`]: fusion units, triplet strategies, the dense gated template.
//! - [`droppath`]: gate distributions, binary-concrete relaxation, objective.
//! - [`lab`]: training, posterior sampling, training-free evaluation, oracle.

pub mod data;
pub mod droppath;
pub mod error;
pub mod fusion;
pub mod lab;
pub mod tensor;

pub use error::{Error, Result};
