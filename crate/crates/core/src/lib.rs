pub mod augment;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod stats;
pub mod tta;

pub use error::{Error, Result};
