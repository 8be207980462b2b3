//! Files, external backends, the evaluation harness and the command line
//! around `atlasfuse-core`.

pub mod config;
pub mod error;
pub mod external;
pub mod harness;
pub mod io;
pub mod prompt_file;

pub use error::{Error, Result};
