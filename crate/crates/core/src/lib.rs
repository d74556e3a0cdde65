pub mod error;
pub mod losses;
pub mod net;
pub mod nn;
pub mod scoring;
pub mod ssm;
pub mod synthvid;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
