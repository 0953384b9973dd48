//! Multi-modal emotion distribution learning.
//!
//! Physiological signals are fused by cross-attention, aligned with behavioral
//! features through optimal transport, and mapped to a distribution over
//! emotion classes by label-correlation-driven attention.

pub mod attention;
pub mod data;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod numerics;
pub mod ot;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/labels.md")]
    mod labels {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
