// `!(x > 0.0)` deliberately rejects NaN along with non-positive values, and
// index loops read more clearly than iterator chains in the matrix code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod client;
pub mod config;
pub mod datastore;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod masked;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod par;
pub mod params;
pub mod report;
pub mod rng;
pub mod server;
pub mod verify;
pub mod wire;
