pub mod appearance;
pub mod backends;
pub mod digest;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod json;
pub mod raster;
pub mod structure;
pub mod vqa;

pub use error::{Error, Result};
