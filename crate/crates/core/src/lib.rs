//! Learned weight sharing for multi-task networks.
//!
//! Each task gets its own copy of a base network. Every shareable layer
//! position keeps a bank of `K` candidate weights, and a categorical search
//! distribution decides which candidate each task uses. Training alternates a
//! natural evolution strategy step on the distribution with a gradient step
//! on the weights; inference uses the most probable assignment.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod autodiff;
pub mod data;
pub mod distribution;
pub mod error;
pub mod experiment;
pub mod nes;
pub mod report;
pub mod sharing;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
