pub mod cli;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
