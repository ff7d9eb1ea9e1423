pub mod adversarial;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod instance;
pub mod nn;
pub mod pairing;
pub mod smfr;
pub mod split_pooling;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
