//! Spatio-temporal message transformer for forecasting microservice system
//! states, with the numeric engine it runs on and a synthetic telemetry
//! simulator.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, training and the
//! command line live in the companion `stmformer` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod array;
pub mod decomp;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod sim;
pub mod tape;
pub mod temporal;

pub use array::DenseArray;
pub use error::{Error, Result};
pub use rng::{Dist, SeededRng};
pub use tape::{Gradients, Tape, Var};
