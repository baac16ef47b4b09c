pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod prefgen;
pub mod sequence;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
