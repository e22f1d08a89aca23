// `!(x > 0.0)` also rejects NaN, which is the point
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod error;
pub mod incidence;
pub mod knapp;
pub mod linalg;
pub mod paraboloid;
pub mod poly;
pub mod quad;
pub mod slopt;
pub mod suite;
pub mod testing;
pub mod visibility;
pub mod weight;

pub use error::{Error, Result};
