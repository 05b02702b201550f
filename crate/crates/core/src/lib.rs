// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recursive concept evolution over a frozen toy transformer.

pub mod analysis;
pub mod autodiff;
pub mod base_model;
pub mod concepts;
pub mod error;
pub mod evolution;
pub mod numerics;
pub mod optim;
pub mod persistence;
pub mod pipeline;
pub mod seed;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Matrix;
