pub mod autodiff;
pub mod config;
pub mod error;
pub mod field;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod rays;
pub mod scenes;
pub mod render;
pub mod step;
pub mod trainer;

pub use error::{Error, Result};
