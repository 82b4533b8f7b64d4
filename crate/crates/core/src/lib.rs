//! Continual dynamic neural graphics primitives.

pub mod accounting;
pub mod checkpoint;
pub mod continual;
pub mod encoders;
pub mod error;
pub mod field;
pub mod losses;
pub mod numerics;
pub mod renderer;
pub mod scene;

pub use error::{Error, Result};
