//! Tubular-structure segmentation in 3D: a small U-shaped network with
//! fuzzy attention on its skip connections, plus a refinement stage that
//! re-predicts the voxels a coarse mask cannot represent after a
//! down/up-sampling round trip.
//!
//! Everything runs on [`tensor`], a reverse-mode engine with hand-written
//! backward passes, generic over `f32` (training) and `f64` (gradient
//! checks). [`phantom`] synthesizes branching tube trees with known
//! centerlines for training and for the tree metrics in [`metrics`].
//!
//! Entry points: [`pipeline`] for training and evaluation, [`model`] for a
//! single step or prediction, [`cli`] for the `fabr` binary.

// negated float comparisons below are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod border;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fuzzy;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
