#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bs;
pub mod error;
pub mod grid;
pub mod market_data;
pub mod optim;
pub mod physical;
pub mod pipeline;
pub mod premia;
pub mod regimes;
pub mod rnd;
pub mod synth;
pub mod vol_surface;

pub use error::{Error, Result};
