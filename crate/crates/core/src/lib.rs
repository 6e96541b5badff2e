//! Conditional transport between patch sets and label sets for multi-label
//! classification, with a desk-scale model to train it end to end.
//!
//! Everything here is `no_std` + `alloc`; file formats and the command line
//! live in the `ctalign` crate.

#![no_std]
// `Float` supplies f64 math only when nothing in the build links std.
#![allow(unused_imports)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod distributions;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod transport;

pub use error::{Error, Result};
