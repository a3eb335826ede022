pub mod attacks;
pub mod error;
pub mod keyrate;
pub mod linalg;
pub mod moment;
pub mod montecarlo;
pub mod noise;
pub mod protocol;
pub mod sdp;

pub use error::{Error, Result};
