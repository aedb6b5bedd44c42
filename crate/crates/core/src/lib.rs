pub mod error;
pub mod factor;
pub mod fixed;
pub mod forecast;
pub mod inference;
pub mod io;
pub mod mixed;
pub mod model;
pub mod run;
pub mod score;
pub mod sim;

pub use error::{Error, Result};
