pub mod audio;
pub mod augment;
mod binfmt;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod provenance;
pub mod seed;
pub mod survey;
pub mod train;

pub use error::{Error, Result};
pub use model::Label;
