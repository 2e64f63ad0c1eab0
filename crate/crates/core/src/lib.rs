pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod losses;
pub mod ndcore;
pub mod nets;
pub mod schedule;
pub mod solver;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
