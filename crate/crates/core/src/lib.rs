//! Prior-data fitted networks for tabular classification with three
//! interchangeable sequence backbones: softmax attention, a unidirectional
//! selective state-space scan, and a bidirectional quasiseparable mixer.
//!
//! A labelled context table and unlabelled query rows go in as one
//! sequence; class probabilities for the queries come out. See
//! [`inference::predict`] and [`inference::rcp_predict`].

pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod prior;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod training;
#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/backbones.md")]
    mod backbones {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/rcp.md")]
    mod rcp {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
