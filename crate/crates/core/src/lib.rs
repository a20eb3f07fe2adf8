pub mod cli;
pub mod dataio;
pub mod decode;
pub mod error;
pub mod evalkit;
pub mod loss;
pub mod numkit;
pub mod scenegraph;
pub mod temporal;
pub mod trainer;
pub mod tubes;

pub use error::{Error, Result};
