mod error;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod divergence;
pub mod eval;
pub mod hardconcrete;
pub mod maskgen;
pub mod numerics;
pub mod training;
pub mod vit;

pub use error::{Error, Result};
