pub mod ablate;
pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod expert;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod router;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
