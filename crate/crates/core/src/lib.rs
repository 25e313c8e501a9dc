//! Claims-reserving engine for IBNR claim counts.
//!
//! Fits three related frequency/reporting-delay models driven by a shared
//! hidden environment chain — a continuous-time two-step variant, a discrete
//! multinomial variant, and a discrete Dirichlet-multinomial variant — and
//! simulates IBNR claim-count distributions from the fitted models, with a
//! Chain Ladder baseline for comparison.

// Index loops over several parallel arrays are the norm in the numerical
// kernels here; iterator-zip rewrites hurt readability.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod delay;
pub mod error;
pub mod glm;
pub mod hmm;
pub mod optim;
pub mod par;

pub mod em;
pub mod ibnr;
pub mod synth;

pub use error::{Error, Result};
