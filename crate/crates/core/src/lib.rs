//! Misconception-aware adaptive learning engine.

pub mod cli;
pub mod config;
pub mod diagnose;
pub mod edgescore;
pub mod error;
pub mod generate;
pub mod io;
pub mod model;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
