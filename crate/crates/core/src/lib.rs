pub mod ar1;
pub mod config;
pub mod mem;
pub mod error;
pub mod ingest;
pub mod io;
pub mod pipeline;
pub mod predict;
pub mod preprocess;
pub mod rfm;
pub mod simgen;

pub use error::{Error, Result};
