// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod datasets;
pub mod diff_engine;
pub mod error;
pub mod evaluation;
pub mod integrators;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod systems;
pub mod training;

pub use error::{MechError, Result};
