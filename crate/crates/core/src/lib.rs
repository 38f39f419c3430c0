pub mod adversary;
pub mod classification;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod feats;
pub mod heads;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pseudo;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
