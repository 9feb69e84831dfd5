//! Simulator and learning toolkit for sensing-aided multi-user FDD precoding.
//!
//! The crate covers the whole chain: a synthetic street scene produces both
//! radio channels and vehicle sensor data; sensor data is turned into compact
//! features; per-vehicle models are trained by vertical federated learning
//! against a sum-rate loss computed at the roadside unit; and a pseudo-CSI
//! simulator builds DL channel labels from a handful of pilots so the models can
//! be updated online without ground truth.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod nnkit;
pub mod pcsi;
pub mod pilots;
pub mod precode;
pub mod rng;
pub mod scene;
pub mod sensing;
pub mod vfl;

pub use error::{Error, Result};
pub use linalg::{CMatrix, CVector, C64};
