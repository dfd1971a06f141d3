pub mod error;
pub mod harness;
pub mod losses;
pub mod mim;
pub mod model;
pub mod nn;
pub mod par;
pub mod pgirm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
