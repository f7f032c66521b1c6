pub mod canvas;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod layout;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod training;

pub use canvas::Canvas;
pub use error::{Error, Result};
