// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod laplace;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod tuner;

pub use error::{Error, Result};
pub use estimators::*;
pub use laplace::*;
pub use model::*;
pub use oracles::*;
pub use tuner::*;
