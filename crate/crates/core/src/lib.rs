pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Mode, Tape, Tensor, Var};
