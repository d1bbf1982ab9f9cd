#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod body_model;
pub mod config;
pub mod container;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod providers;
pub mod regressor;
pub mod sta;
pub mod train;

pub use error::{Error, Result};
