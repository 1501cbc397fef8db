//! Simulation of opportunistic federated learning: devices refine a shared
//! bootstrap model with gradients computed by the neighbors they meet.
//!
//! The guide under `book/` walks through the pieces; its snippets run as
//! doctests of this crate.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod labels;
pub mod learner;
pub mod linktime;
pub mod mobility;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

// Book chapters, compiled as doctests so the guide cannot drift.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/labels.md")]
    pub mod labels {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    pub mod aggregation {}
    #[doc = include_str!("../../../book/src/decay.md")]
    pub mod decay {}
    #[doc = include_str!("../../../book/src/timing.md")]
    pub mod timing {}
    #[doc = include_str!("../../../book/src/mobility.md")]
    pub mod mobility {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    pub mod scenarios {}
}
