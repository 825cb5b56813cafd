//! Training a toy transformer to memorize text verbatim, then erasing that
//! memorization with entropy maximization on a few gradient-selected blocks,
//! alongside baseline erasers and memorization/utility metrics.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod erasers;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
