pub mod adversary;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod model;
pub mod pretext;
pub mod prior;
pub mod service;
pub mod training;
pub mod visualize;

pub use error::{Result, SpnError};
