pub mod appearance;
pub mod bench;
pub mod cli;
pub mod error;
pub mod filter;
pub mod image;
pub mod patching;
pub mod sparse;
pub mod subspace;
pub mod synthetic;
pub mod tracker;

pub use error::{Error, Result};
