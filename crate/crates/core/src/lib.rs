//! Evidential calibration for source-free domain adaptation.
//!
//! Dirichlet evidence losses and calibrated information maximisation
//! ([`losses`]), a small MLP with hand-written backprop ([`network`]),
//! prototype pseudolabels rectified under class-prior constraints
//! ([`pseudolabel`]), the adaptation loop ([`adaptation`]) and calibration
//! metrics ([`calibration`]). [`pipeline`] ties them into the runs driven by
//! the `evcal` binary.

pub mod adaptation;
pub mod calibration;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod pseudolabel;
pub mod seeds;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::Matrix;
