pub mod adapter;
pub mod backbone;
pub mod classifier;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod merging;
pub mod numerics;
pub mod prototype;

pub use error::{Error, Result};
